"""Command-line entry point: ``rigidreg generate|train|register|bench|ablate|replay``.

Configuration precedence, highest first: command-line flags, the JSON
config file, the ``RIGIDREG_SEED`` environment variable (seed only), then
the ``TrainConfig`` defaults. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from .fen import load_checkpoint, save_checkpoint
from .geom3d import SHAPE_KINDS, apply_transform, center, chamfer, euler_angles_deg, generate_shape
from .pcio import file_digest, read_cloud, write_xyz
from .trainer import (
    REGISTRARS,
    TrainConfig,
    ablate,
    evaluate,
    make_dataset,
    register,
    sweep,
    train,
    write_run_log,
    write_sweep_csv,
)

log = logging.getLogger("rigidreg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CLOUD_SUFFIXES = (".xyz", ".ply")
# config keys settable from flags; flags win over the JSON file
FLAG_KEYS = ("epochs", "lr", "seed", "registrar", "k_groups", "threads", "rotation_deg", "noise_sigma", "eval_sigma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    try:
        base = metadata.version("rigidreg")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{base}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def load_schema(name: str) -> dict:
    return json.loads(resources.files("rigidreg").joinpath("schemas", f"{name}.schema.json").read_text())


def write_json(path: Path, data, schema: str | None = None) -> None:
    if schema:
        jsonschema.validate(data, load_schema(schema))
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def resolve_seed(flag_seed, cfg_seed) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if cfg_seed is not None:
        return int(cfg_seed)
    env = os.environ.get("RIGIDREG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"RIGIDREG_SEED must be an integer, got {env!r}") from exc
    return 0


def build_config(args) -> TrainConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: malformed JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None and key != "seed":
            raw[key] = v
    raw["seed"] = resolve_seed(getattr(args, "seed", None), raw.get("seed"))
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def list_clouds(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"{d}: no .xyz or .ply files")
    return files


def load_dir(directory):
    files = list_clouds(directory)
    return [read_cloud(p) for p in files], files


class Manifest:
    """Collects what a run needs to be replayed and checked."""

    def __init__(self, command: str, argv: list[str], cfg: dict | None, seed: int):
        self.data = {
            "command": command,
            "argv": argv,
            "cwd": os.getcwd(),
            "config": cfg,
            "seed": seed,
            "version": version_string(),
            "inputs": {},
            "outputs": {},
            "timings_s": {},
            "notes": {},
        }
        self._t = time.perf_counter()

    def add_input(self, path) -> None:
        self.data["inputs"][str(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.data["outputs"][str(path)] = file_digest(path)

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.data["timings_s"][stage] = round(now - self._t, 6)
        self._t = now

    def write(self, path: Path) -> None:
        write_json(path, self.data, "manifest")


def default_manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.n < 8:
        raise UsageError("--n must be at least 8")
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    seed = resolve_seed(args.seed, None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("generate", args.argv, {"kind": args.kind, "n": args.n, "count": args.count, "centered": True}, seed)
    seeds = np.random.SeedSequence(seed).generate_state(args.count)
    for i, s in enumerate(seeds):
        path = out / f"{args.kind}_{i:04d}.xyz"
        write_xyz(path, center(generate_shape(args.kind, args.n, int(s))))
        man.add_output(path)
    man.lap("generate")
    man.write(out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    data, files = load_dir(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log.csv")
    man = Manifest("train", args.argv, cfg.to_dict(), cfg.seed)
    for f in files:
        man.add_input(f)
    model = None
    if args.resume and out.exists():
        model, extra = load_checkpoint(out)
        if extra.get("train_config", {}).get("seed") not in (None, cfg.seed):
            raise UsageError("resume checkpoint was trained with a different seed")
        man.data["notes"]["resumed_from_step"] = model.step
    man.lap("load")
    model, rows = train(data, cfg, model=model)
    man.lap("train")
    if rows and not np.all(np.isfinite(np.array(rows, dtype=float))):
        raise RuntimeError("non-finite loss encountered")
    save_checkpoint(out, model, extra={"train_config": cfg.to_dict()})
    resumed = "resumed_from_step" in man.data["notes"]
    write_run_log(log_path, rows, append=resumed and log_path.exists())
    man.add_output(out)
    man.add_output(log_path)
    man.data["notes"]["final_step"] = model.step
    man.lap("write")
    man.write(Path(args.manifest) if args.manifest else default_manifest_path(out))
    return EXIT_OK


def _model_and_config(args):
    """Checkpoint (optional for icp) and the config used for inference."""
    model, base = None, {}
    if args.checkpoint:
        model, extra = load_checkpoint(args.checkpoint)
        base = extra.get("train_config", {})
    elif args.registrar not in (None, "icp"):
        raise UsageError(f"registrar {args.registrar!r} needs --checkpoint")
    raw = dict(base)
    if args.config:
        raw.update(json.loads(Path(args.config).read_text()))
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None and key != "seed":
            raw[key] = v
    raw["seed"] = resolve_seed(args.seed, raw.get("seed"))
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if model is not None and model.cfg != cfg.fen_config():
        raise UsageError("config is incompatible with the checkpoint architecture")
    return model, cfg


def cmd_register(args) -> int:
    model, cfg = _model_and_config(args)
    registrar = args.registrar or cfg.registrar
    src, dst = read_cloud(args.src), read_cloud(args.dst)
    man = Manifest("register", args.argv, cfg.to_dict(), cfg.seed)
    for p in (args.src, args.dst) + ((args.checkpoint,) if args.checkpoint else ()):
        man.add_input(p)
    rng = np.random.default_rng([cfg.seed, 5])
    T, _ = register(None if registrar == "icp" else model, src, dst, cfg.for_eval(), rng, registrar=registrar)
    man.lap("register")
    out = {
        "R": T.R.reshape(-1).tolist(),
        "t": T.t.tolist(),
        "chamfer": chamfer(apply_transform(src, T), dst),
        "euler_deg": list(euler_angles_deg(T.R)),
        "registrar": registrar,
        "seed": cfg.seed,
    }
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, out, "register")
    man.add_output(path)
    man.write(Path(args.manifest) if args.manifest else default_manifest_path(path))
    return EXIT_OK


def _datasets(args, cfg):
    if args.train_dir:
        train_set, train_files = load_dir(args.train_dir)
    else:
        train_set, train_files = make_dataset(args.n_train, args.n_points, cfg.seed + 1), []
    if args.test_dir:
        test_set, test_files = load_dir(args.test_dir)
    else:
        test_set, test_files = make_dataset(args.n_test, args.n_points, cfg.seed + 2), []
    return train_set, test_set, train_files + test_files


def _parse_grid(text):
    if text is None or text.strip() == "":
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}") from exc


def cmd_bench(args) -> int:
    cfg = build_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("bench", args.argv, cfg.to_dict(), cfg.seed)
    train_set, test_set, files = _datasets(args, cfg)
    for f in files:
        man.add_input(f)
    man.data["notes"]["dataset"] = {"n_train": len(train_set), "n_test": len(test_set), "centered": True}
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        man.add_input(args.checkpoint)
    elif cfg.registrar != "icp":
        model, _ = train(train_set, cfg)
    man.lap("train")
    report = evaluate(model, test_set, cfg)
    metrics = {"config": cfg.to_dict(), **report.to_dict(with_rows=True)}
    write_json(out / "metrics.json", metrics, "metrics")
    man.add_output(out / "metrics.json")
    man.lap("evaluate")
    for axis, grid in (("rotation_range", _parse_grid(args.rotation_grid)), ("noise_sigma", _parse_grid(args.noise_grid))):
        if not grid:
            continue
        rows = sweep(axis, grid, cfg, train_set, test_set, model=model if axis == "noise_sigma" else None)
        path = out / f"sweep_{axis}.csv"
        write_sweep_csv(path, rows)
        man.add_output(path)
        man.lap(f"sweep_{axis}")
    man.write(out / "manifest.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("ablate", args.argv, cfg.to_dict(), cfg.seed)
    train_set, test_set, files = _datasets(args, cfg)
    for f in files:
        man.add_input(f)
    rows, _ = ablate(cfg, train_set, test_set)
    man.lap("ablate")
    write_json(out / "ablation.json", {"config": cfg.to_dict(), "rows": rows}, "ablation")
    keys = ["mode", "rmse_r", "mae_r", "rmse_t", "mae_t", "chamfer"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r["mode"]] + [repr(float(r[k])) for k in keys[1:]])
    man.add_output(out / "ablation.json")
    man.add_output(out / "ablation.csv")
    man.write(out / "manifest.json")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest and compare output digests."""
    data = json.loads(Path(args.manifest).read_text())
    jsonschema.validate(data, load_schema("manifest"))
    expected = data["outputs"]
    cwd = os.getcwd()
    os.chdir(data["cwd"])
    try:
        code = main(data["argv"])
    finally:
        os.chdir(cwd)
    if code != EXIT_OK:
        return code
    mismatched = [p for p, digest in expected.items()
                  if file_digest(Path(data["cwd"]) / p) != digest]
    for p in mismatched:
        print(f"output differs: {p}", file=sys.stderr)
    return EXIT_RUNTIME if mismatched else EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_flags(p, with_config=True):
    if with_config:
        p.add_argument("--config", help="JSON TrainConfig document")
    p.add_argument("--seed", type=int, help="overrides config; RIGIDREG_SEED is the fallback")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--registrar", choices=REGISTRARS)
    p.add_argument("--k-groups", dest="k_groups", type=int)
    p.add_argument("--rotation-deg", dest="rotation_deg", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--eval-sigma", dest="eval_sigma", type=float)
    p.add_argument("--threads", type=int, help="cap on worker threads for consensus scoring")


def _add_data_flags(p):
    p.add_argument("--train-dir")
    p.add_argument("--test-dir")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-points", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rigidreg", description="Rigid point-cloud registration by weighted consensus.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic clouds as XYZ files")
    g.add_argument("--kind", choices=SHAPE_KINDS, required=True)
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the embedding network on a directory of clouds")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="align SRC onto DST")
    _add_config_flags(r)
    r.add_argument("--checkpoint")
    r.add_argument("--src", required=True)
    r.add_argument("--dst", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--manifest")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="train, evaluate and sweep")
    _add_config_flags(b)
    _add_data_flags(b)
    b.add_argument("--checkpoint", help="skip training and use this model")
    b.add_argument("--rotation-grid", default="", help="comma-separated degrees, e.g. 30,90,180")
    b.add_argument("--noise-grid", default="", help="comma-separated sigmas")
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="full method plus ablation modes (i)-(vi)")
    _add_config_flags(a)
    _add_data_flags(a)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rigidreg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, jsonschema.ValidationError) as exc:
        print(f"rigidreg: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
