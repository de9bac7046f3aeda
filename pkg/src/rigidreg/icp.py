"""Point-to-point ICP baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .consensus import kabsch
from .geom3d import RigidTransform, as_points


@dataclass
class IcpConfig:
    max_iters: int = 50
    tol: float = 1e-10
    init: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    mse: float
    history: tuple[float, ...]
    converged: bool


def icp(x, y, cfg: IcpConfig | None = None) -> IcpResult:
    """Alternate nearest-neighbour matching into ``y`` and Kabsch on the matches.

    Stops once the mean squared NN distance changes by less than ``cfg.tol``
    or after ``cfg.max_iters`` iterations; not converging is reported, not
    raised.
    """
    cfg = cfg or IcpConfig()
    px, py = as_points(x), as_points(y)
    tree = cKDTree(py)
    T = cfg.init
    moved = px @ T.R.T + T.t
    d, idx = tree.query(moved)
    mse = float(np.mean(d**2))
    history = [mse]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        step = kabsch(moved, py[idx]) if len(px) >= 3 else RigidTransform(np.eye(3), (py[idx] - moved).mean(axis=0))
        T = step.compose(T)
        moved = px @ T.R.T + T.t
        d, idx = tree.query(moved)
        new = float(np.mean(d**2))
        history.append(new)
        if abs(mse - new) < cfg.tol:
            mse = new
            converged = True
            break
        mse = new
    return IcpResult(T, it, mse, tuple(history), converged)
