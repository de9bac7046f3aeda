"""Self-supervised pair generation, training loop, registration and metrics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import consensus as cons
from .fen import FenConfig, FenModel, adam_step, fen_backward, fen_forward, fen_init
from .geom3d import (
    SHAPE_KINDS,
    PointCloud,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    axis_angle_matrix,
    center,
    chamfer,
    euler_angles_deg,
    generate_shape,
    random_transform,
    rotation_error_deg,
)
from .icp import IcpConfig, icp
from .losses import LossReport, build_adjacency, total_loss
from .ri_desc import descriptors
from .softcorr import (
    bag_size,
    bag_weights,
    confidence,
    hard_map,
    sample_bag,
    soft_correspondence,
    soft_correspondence_backward,
    uniform_distribution,
)

log = logging.getLogger(__name__)

REGISTRARS = ("consensus", "full", "topk", "icp")

# switched-off component -> config overrides
ABLATIONS = {
    "i_ri_features": {"use_ri": False},
    "ii_global_branch": {"use_global": False},
    "iii_static_graph": {"graph_mode": "dynamic"},
    "iv_pm_sampling": {"sampling_mode": "uniform"},
    "v_consensus_full": {"registrar": "full"},
    "vi_consensus_topk": {"registrar": "topk"},
}


@dataclass
class TrainConfig:
    epochs: int = 3
    pairs_per_epoch: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    q_fraction: float = 0.1
    k_descriptor: int = 16
    k_graph: int = 16
    k_loss: int = 8
    m_p: float = 0.8
    m_n: float = 0.3
    rotation_deg: float = 180.0
    translation: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0
    use_ri: bool = True
    use_global: bool = True
    graph_mode: str = "static"
    sampling_mode: str = "confidence"
    registrar: str = "consensus"
    k_groups: int = 8
    k_top: int | None = None
    l1: int = 64
    l2: int = 64
    l3: int = 32
    edge_hidden: tuple[int, ...] = (32,)
    fusion_hidden: tuple[int, ...] = (64,)
    threads: int = 1
    # evaluation-time overrides; None means reuse the training value
    eval_sigma: float | None = None
    eval_q_fraction: float | None = None

    def __post_init__(self):
        self.edge_hidden = tuple(self.edge_hidden)
        self.fusion_hidden = tuple(self.fusion_hidden)
        checks = {
            "epochs": self.epochs >= 0,
            "lr": self.lr >= 0,
            "beta1": 0 <= self.beta1 < 1,
            "beta2": 0 <= self.beta2 < 1,
            "eps": self.eps > 0,
            "q_fraction": 0 < self.q_fraction <= 1,
            "k_descriptor": self.k_descriptor >= 1,
            "k_graph": self.k_graph >= 1,
            "k_loss": self.k_loss >= 1,
            "m_p": 0 <= self.m_n < self.m_p <= 1,
            "rotation_deg": 0 <= self.rotation_deg <= 180,
            "translation": self.translation >= 0,
            "noise_sigma": self.noise_sigma >= 0,
            "graph_mode": self.graph_mode in ("static", "dynamic"),
            "sampling_mode": self.sampling_mode in ("confidence", "uniform"),
            "registrar": self.registrar in REGISTRARS,
            "k_groups": self.k_groups >= 1,
            "threads": self.threads >= 1,
            "eval_sigma": self.eval_sigma is None or self.eval_sigma >= 0,
            "eval_q_fraction": self.eval_q_fraction is None or 0 < self.eval_q_fraction <= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid TrainConfig value for: {', '.join(bad)}")

    def fen_config(self) -> FenConfig:
        return FenConfig(
            in_channels=7 if self.use_ri else 6,
            l1=self.l1,
            l2=self.l2,
            l3=self.l3,
            edge_hidden=self.edge_hidden,
            fusion_hidden=self.fusion_hidden,
            graph_mode=self.graph_mode,
            k_graph=self.k_graph,
            use_global=self.use_global,
        )

    def for_eval(self) -> "TrainConfig":
        """Copy with the evaluation overrides folded into the training fields."""
        return self.replace(
            noise_sigma=self.noise_sigma if self.eval_sigma is None else self.eval_sigma,
            q_fraction=self.q_fraction if self.eval_q_fraction is None else self.eval_q_fraction,
            eval_sigma=None,
            eval_q_fraction=None,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["edge_hidden"] = list(self.edge_hidden)
        d["fusion_hidden"] = list(self.fusion_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown TrainConfig key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class MetricsReport:
    rmse_r: float
    mae_r: float
    rmse_t: float
    mae_t: float
    chamfer: float
    rmse_r_components: list[float] = field(default_factory=list)
    mae_r_components: list[float] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)

    def to_dict(self, with_rows: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not with_rows:
            d.pop("rows")
        return d


def make_dataset(n_shapes: int, n_points: int, seed: int, kinds=None) -> list[PointCloud]:
    """Centred synthetic shapes cycling through ``kinds`` (all but ``plane`` by default)."""
    kinds = kinds or [k for k in SHAPE_KINDS if k != "plane"]
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_shapes)
    return [center(generate_shape(kinds[i % len(kinds)], n_points, int(seeds[i]))) for i in range(n_shapes)]


def make_pair(x, cfg: TrainConfig, rng: np.random.Generator):
    """Return ``(x, y, T)`` with ``y = T(x) + noise``; row i of y matches row i of x."""
    x = x if isinstance(x, PointCloud) else PointCloud(x)
    T = random_transform(cfg.rotation_deg, cfg.translation, rng)
    y = add_gaussian_noise(apply_transform(x, T), cfg.noise_sigma, rng)
    return x, y, T


def pair_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def embed(model: FenModel, cloud, cfg: TrainConfig):
    feats = descriptors(cloud, cfg.k_descriptor, use_ri=cfg.use_ri)
    return fen_forward(model, feats, cloud)


def train_step(model: FenModel, x, y, cfg: TrainConfig, rng: np.random.Generator) -> LossReport:
    """One optimisation step on a single (x, y) pair with identity correspondence."""
    hx, cx = embed(model, x, cfg)
    hy, cy = embed(model, y, cfg)
    P = soft_correspondence(hx, hy)
    n = P.shape[0]
    dist = confidence(P) if cfg.sampling_mode == "confidence" else uniform_distribution(n)
    bag = sample_bag(dist, bag_size(n, cfg.q_fraction), rng)
    w = bag_weights(bag, n)
    adj = build_adjacency(y, min(cfg.k_loss, n - 1))
    report, dP = total_loss(P, adj, w, cfg.m_p, cfg.m_n)
    dhx, dhy = soft_correspondence_backward(hx, hy, dP)
    fen_backward(model, cx, dhx)
    fen_backward(model, cy, dhy, accumulate=True)
    adam_step(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return report


def train(dataset, cfg: TrainConfig, model: FenModel | None = None, log_rows: list | None = None):
    """Train (or continue training) a model; returns ``(model, run_log)``.

    The run log is a list of ``[step, l_h, l_pq, l_nq, l_c]`` rows. Ground
    truth transforms never reach the loss.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    model = model or fen_init(cfg.fen_config(), cfg.seed)
    rows = log_rows if log_rows is not None else []
    per_epoch = cfg.pairs_per_epoch or len(dataset)
    start_epoch = model.step // per_epoch if per_epoch else 0
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(dataset))
        order = np.resize(order, per_epoch)
        t0 = time.perf_counter()
        losses = []
        for j, idx in enumerate(order):
            rng = pair_rng(cfg.seed, 2, epoch * per_epoch + j)
            x, y, _ = make_pair(dataset[idx], cfg, rng)
            rep = train_step(model, x, y, cfg, rng)
            rows.append([model.step, *rep.as_row()])
            losses.append(rep.l_c)
        log.info("epoch %d: mean L_C %.5f (%.1fs)", epoch, float(np.mean(losses)), time.perf_counter() - t0)
    return model, rows


def register(model: FenModel | None, x, y, cfg: TrainConfig, rng: np.random.Generator,
             registrar: str | None = None):
    """Estimate the transform mapping ``x`` onto ``y`` with the configured registrar.

    Returns ``(transform, info)``; ``info`` holds diagnostics such as the
    experiment list for the consensus registrar.
    """
    registrar = registrar or cfg.registrar
    if registrar == "icp":
        res = icp(x, y, IcpConfig())
        return res.transform, {"iterations": res.iterations, "mse": res.mse}
    if model is None:
        raise ValueError(f"registrar {registrar!r} needs a trained model")
    hx, _ = embed(model, x, cfg)
    hy, _ = embed(model, y, cfg)
    P = soft_correspondence(hx, hy)
    n = P.shape[0]
    q = bag_size(n, cfg.q_fraction)
    if registrar == "full":
        return cons.full_register(x, y, P), {}
    if registrar == "topk":
        return cons.topk_register(x, y, P, cfg.k_top or max(q, 3)), {}
    dist = confidence(P) if cfg.sampling_mode == "confidence" else uniform_distribution(n)
    bag = sample_bag(dist, q, rng)
    k_groups = max(1, min(cfg.k_groups, len(bag) // 3))
    T, results = cons.consensus_register(x, y, P, bag, k_groups, rng, threads=cfg.threads)
    return T, {"experiments": results}


def metrics_from_residuals(rot_res, trans_res, chamfers, rows=None) -> MetricsReport:
    """RMSE/MAE over pairs and components of Euler (deg) and translation residuals."""
    rot = np.asarray(rot_res, dtype=np.float64).reshape(-1, 3)
    tr = np.asarray(trans_res, dtype=np.float64).reshape(-1, 3)
    return MetricsReport(
        rmse_r=float(np.sqrt(np.mean(rot**2))),
        mae_r=float(np.mean(np.abs(rot))),
        rmse_t=float(np.sqrt(np.mean(tr**2))),
        mae_t=float(np.mean(np.abs(tr))),
        chamfer=float(np.mean(chamfers)) if len(chamfers) else 0.0,
        rmse_r_components=np.sqrt(np.mean(rot**2, axis=0)).tolist(),
        mae_r_components=np.mean(np.abs(rot), axis=0).tolist(),
        rows=rows or [],
    )


def residuals(T_est: RigidTransform, T_true: RigidTransform):
    rot = np.array(euler_angles_deg(T_est.R.T @ T_true.R))
    return rot, T_est.t - T_true.t


def evaluate(model: FenModel | None, dataset, cfg: TrainConfig, registrar: str | None = None,
             stream: int = 3) -> MetricsReport:
    """Register a fresh augmented pair per shape and aggregate the errors."""
    cfg = cfg.for_eval()
    rot_res, tr_res, chamfers, rows = [], [], [], []
    for i, x in enumerate(dataset):
        rng = pair_rng(cfg.seed, stream, i)
        x, y, T = make_pair(x, cfg, rng)
        T_hat, _ = register(model, x, y, cfg, rng, registrar=registrar)
        r, t = residuals(T_hat, T)
        c = chamfer(apply_transform(x, T_hat), y)
        rot_res.append(r)
        tr_res.append(t)
        chamfers.append(c)
        rows.append({"pair": i, "euler_residual_deg": r.tolist(), "t_residual": t.tolist(), "chamfer": c})
    return metrics_from_residuals(rot_res, tr_res, chamfers, rows)


def sweep(axis: str, grid, cfg: TrainConfig, train_set, test_set, model: FenModel | None = None):
    """Evaluate over a grid of rotation ranges (retraining each point) or noise levels.

    Noise sweeps reuse one model, trained once if none is given, and vary
    only the evaluation noise; rotation sweeps always retrain at each range.
    Returns a
    list of ``{axis, value, rmse_r, mae_r, rmse_t, mae_t}`` rows.
    """
    if axis not in ("rotation_range", "noise_sigma"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must be nonempty")
    rows = []
    if axis == "noise_sigma" and model is None and cfg.registrar != "icp":
        model, _ = train(train_set, cfg)
    for v in grid:
        if axis == "rotation_range":
            c = cfg.replace(rotation_deg=float(v))
            m = None if c.registrar == "icp" else train(train_set, c)[0]
        else:
            c = cfg.replace(eval_sigma=float(v))
            m = model
        rep = evaluate(m, test_set, c)
        rows.append({"axis": axis, "value": float(v), **rep.to_dict(with_rows=False)})
    return rows


def write_sweep_csv(path, rows) -> None:
    keys = ["axis", "value", "rmse_r", "mae_r", "rmse_t", "mae_t", "chamfer"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], str) else repr(float(r[k])) for k in keys])


def write_run_log(path, rows, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["step", "l_h", "l_pq", "l_nq", "l_c"])
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])


# fields that only matter at inference; ablations touching just these reuse the base model
_EVAL_ONLY = {"registrar", "k_groups", "k_top", "eval_sigma", "eval_q_fraction", "threads"}


def ablate(cfg: TrainConfig, train_set, test_set, base_model: FenModel | None = None):
    """Full method plus every ablation mode on the same data and seed.

    Returns ``(rows, models)``: one ``{mode, rmse_r, ...}`` row per mode with
    the full method first, and the trained model for each mode.
    """
    base_model = base_model or train(train_set, cfg)[0]
    rows, models = [], {"full_method": base_model}
    rep = evaluate(base_model, test_set, cfg)
    rows.append({"mode": "full_method", **rep.to_dict(with_rows=False)})
    for mode, overrides in ABLATIONS.items():
        c = cfg.replace(**overrides)
        model = base_model if set(overrides) <= _EVAL_ONLY else train(train_set, c)[0]
        models[mode] = model
        rep = evaluate(model, test_set, c)
        rows.append({"mode": mode, **rep.to_dict(with_rows=False)})
    return rows, models


def half_turn_trials(model: FenModel, cfg: TrainConfig, n_trials: int = 20, n_points: int = 256,
                     kind: str = "plane"):
    """Rotation errors (deg) of ICP and of the learned registrar on half-turn pairs.

    Each trial rotates a fresh ``kind`` shape by exactly 180 degrees about a
    random axis, which is the regime where proximity matching from the
    identity stalls on symmetric shapes.
    """
    cfg = cfg.for_eval()
    icp_err, model_err = [], []
    for s in range(n_trials):
        rng = pair_rng(cfg.seed, 4, s)
        x = center(generate_shape(kind, n_points, int(rng.integers(2**31))))
        axis = rng.normal(size=3)
        R = axis_angle_matrix(axis / np.linalg.norm(axis), np.pi)
        T = RigidTransform(R, rng.uniform(-cfg.translation, cfg.translation, 3))
        y = add_gaussian_noise(apply_transform(x, T), cfg.noise_sigma, rng)
        T_icp, _ = register(None, x, y, cfg, rng, registrar="icp")
        T_hat, _ = register(model, x, y, cfg, rng)
        icp_err.append(rotation_error_deg(T_icp.R, R))
        model_err.append(rotation_error_deg(T_hat.R, R))
    return icp_err, model_err
