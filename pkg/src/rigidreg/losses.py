"""Hard-mapping and confidence-weighted contrastive losses on the similarity matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom3d import knn


@dataclass(frozen=True)
class AdjacencySets:
    neighbors: np.ndarray  # (N, k_loss)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def matrix(self, n_cols: int | None = None) -> np.ndarray:
        n = self.neighbors.shape[0]
        A = np.zeros((n, n_cols or n), dtype=bool)
        A[np.arange(n)[:, None], self.neighbors] = True
        return A


@dataclass(frozen=True)
class LossReport:
    l_h: float
    l_pq: float
    l_nq: float
    l_c: float

    def as_row(self) -> list[float]:
        return [self.l_h, self.l_pq, self.l_nq, self.l_c]


def off_neighbors(A: np.ndarray) -> np.ndarray:
    """Non-neighbour mask; the diagonal is excluded since the hard loss alone drives P_ii."""
    Abar = ~A
    np.fill_diagonal(Abar, False)
    return Abar


def _check_square(P):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"training pairs need a square P, got shape {P.shape}")
    return P


def hard_loss(P) -> float:
    P = _check_square(P)
    return float(np.mean(1.0 - np.diag(P)))


def build_adjacency(y, k_loss: int) -> AdjacencySets:
    """k Euclidean nearest neighbours of every target point (self excluded)."""
    return AdjacencySets(knn(y, k_loss).neighbors)


def _check_margins(m_p, m_n):
    if not (0.0 <= m_n < m_p <= 1.0):
        raise ValueError(f"margins must satisfy 0 <= m_n < m_p <= 1, got m_p={m_p}, m_n={m_n}")


def _terms(P, adj, w, m_p, m_n):
    P = _check_square(P)
    _check_margins(m_p, m_n)
    w = np.asarray(w, dtype=np.float64)
    A = adj.matrix(P.shape[1])
    Abar = off_neighbors(A)
    q = w.sum()
    sum_a = A.sum()
    sum_abar = Abar.sum()
    pos = np.where(A, np.maximum(0.0, m_p - P), 0.0)
    neg = np.where(Abar, np.maximum(0.0, P - m_n), 0.0)
    l_pq = float(w @ pos.sum(axis=1) / (q * sum_a)) if q > 0 else 0.0
    l_nq = float(w @ neg.sum(axis=1) / (q * sum_abar)) if q > 0 else 0.0
    return P, A, Abar, w, q, sum_a, sum_abar, l_pq, l_nq


def contrastive_losses(P, adj: AdjacencySets, w, m_p: float, m_n: float) -> tuple[float, float]:
    """Bag-weighted positive and negative margin losses ``(l_pq, l_nq)``.

    Normalised by ``|Q| * sum(A)`` and ``|Q| * sum(A_bar)`` with ``|Q| = sum(w)``.
    ``A_bar`` is every off-diagonal non-neighbour entry.
    """
    *_, l_pq, l_nq = _terms(P, adj, w, m_p, m_n)
    return l_pq, l_nq


def total_loss(P, adj: AdjacencySets, w, m_p: float, m_n: float) -> tuple[LossReport, np.ndarray]:
    """Loss report and ``dL/dP``. Hinge subgradients are 0 at the kink."""
    P, A, Abar, w, q, sum_a, sum_abar, l_pq, l_nq = _terms(P, adj, w, m_p, m_n)
    n = P.shape[0]
    l_h = float(np.mean(1.0 - np.diag(P)))
    dP = np.zeros_like(P)
    if q > 0:
        wr = w[:, None]
        dP -= np.where(A & (P < m_p), wr, 0.0) / (q * sum_a)
        dP += np.where(Abar & (P > m_n), wr, 0.0) / (q * sum_abar)
    # 1 - P_ii read as the hinge max(0, 1 - P_ii) on the cosine range
    diag = np.arange(n)
    dP[diag, diag] -= np.where(P[diag, diag] < 1.0, 1.0 / n, 0.0)
    report = LossReport(l_h, l_pq, l_nq, l_h + l_pq + l_nq)
    return report, dP


def hinge_margin(P, adj: AdjacencySets, m_p: float, m_n: float) -> float:
    """Smallest distance of any active-set entry of P to its hinge point."""
    P = np.asarray(P)
    A = adj.matrix(P.shape[1])
    return float(min(np.abs(P[A] - m_p).min(initial=np.inf), np.abs(P[off_neighbors(A)] - m_n).min(initial=np.inf)))
