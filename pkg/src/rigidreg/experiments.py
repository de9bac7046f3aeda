"""Desk-scale experiment battery shared by the acceptance suite and scripts."""

from __future__ import annotations

import logging
import time

from .trainer import TrainConfig, ablate, evaluate, half_turn_trials, make_dataset, sweep, train

log = logging.getLogger(__name__)

ROTATIONS = (30.0, 90.0, 180.0)
NOISE = (0.0, 0.005, 0.01, 0.02)


def desk_battery(cfg: TrainConfig, n_train: int = 200, n_test: int = 50, n_points: int = 256) -> dict:
    """Rotation sweep (full method and Cartesian inputs), end-to-end metrics,
    noise sweep, ablation table and half-turn trials on one dataset."""
    train_set = make_dataset(n_train, n_points, cfg.seed + 1)
    test_set = make_dataset(n_test, n_points, cfg.seed + 2)
    out = {"config": cfg.to_dict(), "n_train": n_train, "n_test": n_test, "n_points": n_points}
    timings = {}

    models, rot = {}, {"full_method": {}, "i_ri_features": {}}
    for deg in ROTATIONS:
        for name, over in (("full_method", {}), ("i_ri_features", {"use_ri": False})):
            c = cfg.replace(rotation_deg=deg, **over)
            t0 = time.perf_counter()
            models[name, deg] = train(train_set, c)[0]
            timings[f"train_{name}_{int(deg)}"] = time.perf_counter() - t0
            rot[name][str(int(deg))] = evaluate(models[name, deg], test_set, c).rmse_r
            log.info("rotation %s %g: rmse_r %.4f", name, deg, rot[name][str(int(deg))])
    out["rotation_sweep"] = rot

    full = models["full_method", cfg.rotation_deg] if ("full_method", cfg.rotation_deg) in models \
        else train(train_set, cfg)[0]
    out["end_to_end"] = evaluate(full, test_set, cfg).to_dict(with_rows=False)
    out["noise_sweep"] = sweep("noise_sigma", NOISE, cfg, train_set, test_set, model=full)

    rows, _ = ablate(cfg, train_set, test_set, base_model=full)
    out["ablation"] = rows

    icp_err, model_err = half_turn_trials(full, cfg)
    out["half_turn"] = {"icp": icp_err, "model": model_err}
    out["timings_s"] = timings
    return out
