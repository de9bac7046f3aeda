"""Soft correspondence between embeddings, confidence metric and sample bags."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class ConfidenceDistribution:
    p_m: np.ndarray
    s: np.ndarray


def _unit_rows(h):
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    u = h / safe[:, None]
    u[norms < ZERO_NORM] = 0.0
    return u, norms


def soft_correspondence(hx, hy) -> np.ndarray:
    """Cosine similarity matrix ``P[i, j] = cos(hx_i, hy_j)``.

    Rows with (near) zero norm have similarity 0 to everything.
    """
    hx = np.asarray(hx, dtype=np.float64)
    hy = np.asarray(hy, dtype=np.float64)
    if hx.shape[1] != hy.shape[1]:
        raise ValueError(f"embedding widths differ: {hx.shape[1]} vs {hy.shape[1]}")
    ux, _ = _unit_rows(hx)
    uy, _ = _unit_rows(hy)
    return np.clip(ux @ uy.T, -1.0, 1.0)


def soft_correspondence_backward(hx, hy, dP):
    """Gradients of a scalar loss wrt ``hx`` and ``hy`` given ``dL/dP``."""
    ux, nx = _unit_rows(np.asarray(hx, dtype=np.float64))
    uy, ny = _unit_rows(np.asarray(hy, dtype=np.float64))
    dux = dP @ uy
    duy = dP.T @ ux
    # d(h/|h|) = (I - u u^T) / |h|
    dhx = (dux - ux * (ux * dux).sum(axis=1, keepdims=True)) / np.where(nx < ZERO_NORM, 1.0, nx)[:, None]
    dhy = (duy - uy * (uy * duy).sum(axis=1, keepdims=True)) / np.where(ny < ZERO_NORM, 1.0, ny)[:, None]
    dhx[nx < ZERO_NORM] = 0.0
    dhy[ny < ZERO_NORM] = 0.0
    return dhx, dhy


def hard_map(P) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column index."""
    return np.asarray(P).argmax(axis=1)


def confidence(P) -> ConfidenceDistribution:
    """Clipped row maxima and their normalisation into a sampling PMF."""
    p_m = np.maximum(np.asarray(P).max(axis=1), 0.0)
    total = p_m.sum()
    if total > 0:
        s = p_m / total
    else:
        s = np.full(p_m.shape, 1.0 / p_m.size)
    return ConfidenceDistribution(p_m, s)


def uniform_distribution(n: int) -> ConfidenceDistribution:
    return ConfidenceDistribution(np.ones(n), np.full(n, 1.0 / n))


def sample_bag(dist: ConfidenceDistribution, size: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. draws (with replacement) of source indices from ``dist.s``."""
    if size < 1:
        raise ValueError("bag size must be >= 1")
    cdf = np.cumsum(dist.s)
    cdf /= cdf[-1]
    u = rng.random(size)
    return np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1)


def bag_weights(bag, n_source: int) -> np.ndarray:
    bag = np.asarray(bag, dtype=np.int64)
    if bag.size and (bag.min() < 0 or bag.max() >= n_source):
        raise ValueError("bag holds an index outside the source cloud")
    return np.bincount(bag, minlength=n_source)


def bag_size(n_source: int, fraction: float = 0.1) -> int:
    return max(1, int(n_source * fraction))


def dump_csv(path, P, dist: ConfidenceDistribution | None = None) -> None:
    """Debug dump: P row-major, optionally followed by p_m and s columns."""
    P = np.asarray(P)
    cols = [P]
    header = [f"P{j}" for j in range(P.shape[1])]
    if dist is not None:
        cols += [dist.p_m[:, None], dist.s[:, None]]
        header += ["p_m", "s"]
    np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(header), comments="", fmt="%.17g")
