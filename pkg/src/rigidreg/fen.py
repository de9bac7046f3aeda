"""Feature extraction network: local and global edge-conv branches fused per point.

Forward and backward passes are written out by hand in numpy (float64).
Each edge layer computes ``lrelu(max_j W [f_i, f_j - f_i] + b)``; since the
leaky rectifier is monotone, the max is taken before the nonlinearity and
the backward pass routes gradients to the arg-max neighbour only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geom3d import as_points, knn, knn_bruteforce

CHECKPOINT_HEADER = b"rigidreg-fen-v1"


@dataclass
class FenConfig:
    in_channels: int = 7
    l1: int = 64
    l2: int = 64
    l3: int = 32
    edge_hidden: tuple[int, ...] = (32,)
    fusion_hidden: tuple[int, ...] = (64,)
    graph_mode: str = "static"
    k_graph: int = 16
    use_global: bool = True
    negative_slope: float = 0.01

    def __post_init__(self):
        self.edge_hidden = tuple(int(w) for w in self.edge_hidden)
        self.fusion_hidden = tuple(int(w) for w in self.fusion_hidden)
        widths = (self.in_channels, self.l1, self.l2, *self.edge_hidden, *self.fusion_hidden)
        if min(widths) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.l3 < 4:
            raise ValueError("embedding width l3 must be >= 4")
        if self.graph_mode not in ("static", "dynamic"):
            raise ValueError(f"graph_mode must be 'static' or 'dynamic', got {self.graph_mode!r}")
        if self.k_graph < 1:
            raise ValueError("k_graph must be >= 1")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        branches = [("loc", self.l1)] + ([("glob", self.l2)] if self.use_global else [])
        for name, out in branches:
            widths = [*self.edge_hidden, out]
            prev = self.in_channels
            for i, w in enumerate(widths):
                fan_in = prev if i == 0 else 2 * prev
                shapes[f"{name}{i}.W"] = (fan_in, w)
                shapes[f"{name}{i}.b"] = (w,)
                prev = w
        prev = self.l1 + (self.l2 if self.use_global else 0)
        for i, w in enumerate([*self.fusion_hidden, self.l3]):
            shapes[f"fuse{i}.W"] = (prev, w)
            shapes[f"fuse{i}.b"] = (w,)
            prev = w
        return shapes


@dataclass
class FenModel:
    cfg: FenConfig
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.grads.setdefault(name, np.zeros_like(p))
            self.adam_m.setdefault(name, np.zeros_like(p))
            self.adam_v.setdefault(name, np.zeros_like(p))

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "FenModel":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return FenModel(self.cfg, dup(self.params), dup(self.grads), dup(self.adam_m), dup(self.adam_v), self.step)


def fen_init(cfg: FenConfig, seed: int) -> FenModel:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-s, s, size=shape)
    return FenModel(cfg, params)


def _lrelu(z, slope):
    return np.where(z > 0, z, slope * z)


def _lrelu_grad(z, slope):
    return np.where(z > 0, 1.0, slope)


def _branch_forward(model, prefix, feats, static_graph):
    cfg = model.cfg
    P = model.params
    n_layers = len(cfg.edge_hidden) + 1
    layers = []
    # first layer acts on the precomputed per-neighbour descriptors
    W, b = P[f"{prefix}0.W"], P[f"{prefix}0.b"]
    Z = feats @ W + b  # (N, k, h)
    arg = Z.argmax(axis=1)  # (N, h)
    zmax = np.take_along_axis(Z, arg[:, None, :], axis=1)[:, 0, :]
    F = _lrelu(zmax, cfg.negative_slope)
    layers.append({"arg": arg, "zmax": zmax, "F": F})
    for li in range(1, n_layers):
        W, b = P[f"{prefix}{li}.W"], P[f"{prefix}{li}.b"]
        h = F.shape[1]
        Wa = W[:h] - W[h:]
        Wb = W[h:]
        if cfg.graph_mode == "static":
            G = static_graph
        else:
            G = knn_bruteforce(F, min(cfg.k_graph, F.shape[0] - 1))
        U = F @ Wa
        V = F @ Wb
        Z = U[:, None, :] + V[G] + b  # (N, kg, h')
        arg = Z.argmax(axis=1)
        zmax = np.take_along_axis(Z, arg[:, None, :], axis=1)[:, 0, :]
        F_in = F
        F = _lrelu(zmax, cfg.negative_slope)
        layers.append({"arg": arg, "zmax": zmax, "F": F, "F_in": F_in, "G": G})
    return F, layers


def fen_forward(model: FenModel, features, cloud):
    """Embed one cloud. Returns ``(embedding (N, l3), cache)``."""
    cfg = model.cfg
    feats = getattr(features, "values", features)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[2] != cfg.in_channels:
        raise ValueError(f"expected (N, k, {cfg.in_channels}) features, got {feats.shape}")
    pts = as_points(cloud)
    n = feats.shape[0]
    if pts.shape[0] != n:
        raise ValueError("feature rows and cloud size disagree")
    static_graph = None
    if len(cfg.edge_hidden) > 0 and cfg.graph_mode == "static":
        static_graph = knn(pts, min(cfg.k_graph, n - 1)).neighbors
    cache = {"feats": feats}
    h_loc, cache["loc"] = _branch_forward(model, "loc", feats, static_graph)
    parts = [h_loc]
    if cfg.use_global:
        g_last, cache["glob"] = _branch_forward(model, "glob", feats, static_graph)
        g_arg = g_last.argmax(axis=0)
        h_glob = g_last[g_arg, np.arange(g_last.shape[1])]
        cache["glob_arg"] = g_arg
        parts.append(np.broadcast_to(h_glob, (n, h_glob.size)))
    H = np.concatenate(parts, axis=1)
    fuse = []
    n_fuse = len(cfg.fusion_hidden) + 1
    for i in range(n_fuse):
        W, b = model.params[f"fuse{i}.W"], model.params[f"fuse{i}.b"]
        Z = H @ W + b
        fuse.append({"H": H, "Z": Z})
        # final dense layer is linear so embeddings can carry negative cosines
        H = _lrelu(Z, cfg.negative_slope) if i < n_fuse - 1 else Z
    cache["fuse"] = fuse
    return H, cache


def _branch_backward(model, prefix, layers, feats, dF, grads):
    slope = model.cfg.negative_slope
    for li in range(len(layers) - 1, -1, -1):
        L = layers[li]
        dz = dF * _lrelu_grad(L["zmax"], slope)  # (N, h')
        arg = L["arg"]
        n, hout = dz.shape
        if li == 0:
            # gather descriptor rows picked by the max for each output channel
            sel = feats[np.arange(n)[:, None], arg]  # (N, h', C)
            grads[f"{prefix}0.W"] = np.einsum("nhc,nh->ch", sel, dz)
            grads[f"{prefix}0.b"] = dz.sum(axis=0)
            continue
        F_in, G = L["F_in"], L["G"]
        W = model.params[f"{prefix}{li}.W"]
        h = F_in.shape[1]
        Wa, Wb = W[:h] - W[h:], W[h:]
        dU = dz
        j = G[np.arange(n)[:, None], arg]  # (N, h') neighbour index chosen per channel
        flat = (j * hout + np.arange(hout)).ravel()
        dV = np.bincount(flat, weights=dz.ravel(), minlength=n * hout).reshape(n, hout)
        dWa = F_in.T @ dU
        dWb = F_in.T @ dV
        grads[f"{prefix}{li}.W"] = np.vstack([dWa, dWb - dWa])
        grads[f"{prefix}{li}.b"] = dz.sum(axis=0)
        dF = dU @ Wa.T + dV @ Wb.T


def fen_backward(model: FenModel, cache, d_embedding, accumulate: bool = False):
    """Back-propagate ``d_embedding`` (N, l3) into ``model.grads``.

    Gradients overwrite the buffers unless ``accumulate`` is set, in which
    case they are added (used when source and target share weights).
    """
    if cache is None or "fuse" not in cache:
        raise ValueError("fen_backward needs the cache returned by fen_forward")
    cfg = model.cfg
    grads: dict[str, np.ndarray] = {}
    dH = np.asarray(d_embedding, dtype=np.float64)
    fuse = cache["fuse"]
    for i in range(len(fuse) - 1, -1, -1):
        layer = fuse[i]
        if i < len(fuse) - 1:
            dH = dH * _lrelu_grad(layer["Z"], cfg.negative_slope)
        W = model.params[f"fuse{i}.W"]
        grads[f"fuse{i}.W"] = layer["H"].T @ dH
        grads[f"fuse{i}.b"] = dH.sum(axis=0)
        dH = dH @ W.T
    feats = cache["feats"]
    d_loc = dH[:, : cfg.l1]
    _branch_backward(model, "loc", cache["loc"], feats, d_loc, grads)
    if cfg.use_global:
        d_glob = dH[:, cfg.l1 :].sum(axis=0)
        last = cache["glob"][-1]["F"]
        d_last = np.zeros_like(last)
        d_last[cache["glob_arg"], np.arange(last.shape[1])] = d_glob
        _branch_backward(model, "glob", cache["glob"], feats, d_last, grads)
    for name, g in grads.items():
        if accumulate:
            model.grads[name] += g
        else:
            model.grads[name] = g
    return model.grads


def adam_step(model: FenModel, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, step_count: int | None = None) -> None:
    """Bias-corrected Adam update using ``model.grads``; advances ``model.step``."""
    t = model.step + 1 if step_count is None else int(step_count)
    for name, p in model.params.items():
        g = model.grads[name]
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    model.step = t


def save_checkpoint(path, model: FenModel, extra: dict | None = None) -> None:
    """Header line, JSON index line, then raw little-endian float64 tensors."""
    tensors = []
    for prefix, group in (("param", model.params), ("adam_m", model.adam_m), ("adam_v", model.adam_v)):
        for name, arr in group.items():
            tensors.append((f"{prefix}/{name}", arr))
    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = {"config": asdict(model.cfg), "step": model.step, "tensors": index, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_HEADER + b"\n")
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[FenModel, dict]:
    raw = Path(path).read_bytes()
    head, rest = raw.split(b"\n", 1)
    if head != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER.decode()} checkpoint")
    meta_line, blob = rest.split(b"\n", 1)
    meta = json.loads(meta_line)
    cfg = FenConfig(**meta["config"])
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in meta["tensors"]:
        prefix, name = t["name"].split("/", 1)
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=t["offset"])
        groups[prefix][name] = arr.reshape(t["shape"]).astype(np.float64)
    expected = cfg.layer_shapes()
    for name, shape in expected.items():
        if groups["param"].get(name, np.empty(0)).shape != shape:
            raise ValueError(f"{path}: tensor {name} missing or misshapen")
    model = FenModel(cfg, groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"], step=meta["step"])
    return model, meta.get("extra", {})

