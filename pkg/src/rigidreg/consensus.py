"""Kabsch alignment and the confidence-based consensus registrars."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom3d import RigidTransform, apply_transform, as_points, chamfer
from .softcorr import confidence, hard_map

RANK_TOL = 1e-9


@dataclass(frozen=True)
class ExperimentResult:
    transform: RigidTransform
    score: float
    group: np.ndarray

    def to_dict(self) -> dict:
        return {**self.transform.to_dict(), "score": self.score, "group": self.group.tolist()}


def _check_pairs(src, dst):
    if src.shape != dst.shape:
        raise ValueError(f"kabsch needs equal-length point lists, got {src.shape} and {dst.shape}")
    if src.shape[-2] < 3:
        raise ValueError("kabsch needs at least 3 point pairs")


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (det R = +1)."""
    src, dst = as_points(src), as_points(dst)
    _check_pairs(src, dst)
    R, t = kabsch_batch(src[None], dst[None])
    return RigidTransform(R[0], t[0])


def kabsch_batch(src, dst):
    """Solve a stack of Kabsch problems at once; ``src, dst`` are (B, r, 3)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    _check_pairs(src, dst)
    xm = src.mean(axis=1, keepdims=True)
    ym = dst.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", src - xm, dst - ym)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = ym[:, 0, :] - np.einsum("bij,bj->bi", R, xm[:, 0, :])
    return R, t


def degenerate_groups(src) -> np.ndarray:
    """True where a (B, r, 3) point group spans fewer than two dimensions."""
    src = np.asarray(src, dtype=np.float64)
    c = src - src.mean(axis=1, keepdims=True)
    s = np.linalg.svd(c, compute_uv=False)
    scale = np.maximum(s[:, 0], 1e-300)
    return (s[:, 1] / scale < RANK_TOL) | (s[:, 0] < 1e-12)


def _score(x, tree_y, y, R, t):
    return chamfer(x @ R.T + t, y, tree_b=tree_y)


def consensus_register(x, y, P, bag, k_groups: int, rng: np.random.Generator,
                       threads: int = 1, pi: np.ndarray | None = None):
    """Vote among ``k_groups`` Kabsch experiments drawn from the sample bag.

    Each group holds ``r = |bag| // k_groups`` indices drawn uniformly with
    replacement from the bag; the candidate with the lowest chamfer distance
    between the moved source and the target wins. Degenerate groups score
    infinity. Returns ``(transform, experiments)``.
    """
    px, py = as_points(x), as_points(y)
    bag = np.asarray(bag, dtype=np.int64)
    r = len(bag) // k_groups if k_groups > 0 else 0
    if k_groups < 1 or r < 3:
        raise ValueError(f"bag of {len(bag)} cannot feed {k_groups} groups of >= 3 points")
    if pi is None:
        pi = hard_map(P)
    if k_groups == 1 and r == len(bag):
        groups = bag[None, :]
    else:
        groups = bag[rng.integers(0, len(bag), size=(k_groups, r))]
    src = px[groups]
    dst = py[pi[groups]]
    R, t = kabsch_batch(src, dst)
    bad = degenerate_groups(src)
    tree_y = cKDTree(py)
    todo = [i for i in range(k_groups) if not bad[i]]
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            scores_ok = list(ex.map(lambda i: _score(px, tree_y, py, R[i], t[i]), todo))
    else:
        scores_ok = [_score(px, tree_y, py, R[i], t[i]) for i in todo]
    scores = np.full(k_groups, np.inf)
    scores[todo] = scores_ok
    results = [ExperimentResult(RigidTransform(R[i], t[i]), float(scores[i]), groups[i]) for i in range(k_groups)]
    best = int(np.argmin(scores))  # first minimum: deterministic reduction
    if not np.isfinite(scores[best]):
        # every group degenerate: fall back to the whole bag
        return kabsch(px[bag], py[pi[bag]]), results
    return results[best].transform, results


def full_register(x, y, P) -> RigidTransform:
    """Kabsch over every source point and its hard-mapped target."""
    px, py = as_points(x), as_points(y)
    pi = hard_map(P)
    return kabsch(px, py[pi])


def topk_register(x, y, P, k_top: int) -> RigidTransform:
    """Kabsch over the ``k_top`` most confident source points (stable order)."""
    px, py = as_points(x), as_points(y)
    n = px.shape[0]
    if not (3 <= k_top <= n):
        raise ValueError(f"k_top={k_top} must lie in [3, {n}]")
    p_m = confidence(P).p_m
    top = np.argsort(-p_m, kind="stable")[:k_top]
    pi = hard_map(P)
    return kabsch(px[top], py[pi[top]])


def dump_experiments(path, results) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in results], fh, indent=1)


def registration_error(T_est: RigidTransform, T_true: RigidTransform, x) -> float:
    """RMS distance between the source moved by each transform."""
    px = as_points(x)
    d = apply_transform(px, T_est) - apply_transform(px, T_true)
    return float(np.sqrt((d**2).sum(axis=1).mean()))
