"""Run the desk-scale experiment battery and write a JSON summary.

    python scripts/desk_experiment.py [--config configs/desk.json] [--out results/desk.json]
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from rigidreg.experiments import desk_battery
from rigidreg.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description="desk-scale experiment battery")
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="results/desk.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    res = desk_battery(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2) + "\n")

    print("rotation sweep rmse_r:", json.dumps(res["rotation_sweep"]))
    e = res["end_to_end"]
    print(f"end-to-end: rmse_r={e['rmse_r']:.4f} rmse_t={e['rmse_t']:.5f}")
    print("noise sweep rmse_r:", [round(r["rmse_r"], 4) for r in res["noise_sweep"]])
    for r in res["ablation"]:
        print(f"  {r['mode']:>18s}  rmse_r={r['rmse_r']:.4f}")
    h = res["half_turn"]
    print("half-turn: icp > 30deg on", int(np.sum(np.array(h["icp"]) > 30)),
          "| model <= 10deg on", int(np.sum(np.array(h["model"]) <= 10)), "of", len(h["icp"]))


if __name__ == "__main__":
    main()
