"""Exact KROPE kernel machinery over a finite state-action space.

Kernels are plain symmetric ``numpy`` arrays indexed by flat state-action
ids. The operator studied here is

    F(K) = K1 + gamma * P K P^T

where ``K1[i, j] = 1 - |r_i - r_j| / (r_max - r_min)`` and ``P`` is the
target-policy state-action transition matrix; ``P K P^T`` is the expected
kernel value between independent successors of ``i`` and ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from kropelab.errors import (
    ConvergenceError,
    DegenerateRangeError,
    DimensionError,
    ParameterError,
    ValidationError,
)

PSD_TOLERANCE = 1e-8


def _square(name: str, m: np.ndarray, n: int | None = None) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        raise DimensionError(f"{name} must be square{'' if n is None else f' of size {n}'}, got {m.shape}")
    return m


def validate_kernel(k: np.ndarray, psd_tolerance: float = PSD_TOLERANCE) -> np.ndarray:
    """Check symmetry and positive semidefiniteness; return ``k`` as a float array."""
    k = _square("kernel", k)
    scale = max(1.0, float(np.max(np.abs(k)))) if k.size else 1.0
    if np.max(np.abs(k - k.T), initial=0.0) > 1e-12 * scale:
        raise ValidationError("kernel matrix is not symmetric")
    lam_min = np.linalg.eigvalsh(k)[0] if k.size else 0.0
    if lam_min < -psd_tolerance * scale:
        raise ValidationError(f"kernel matrix is not PSD (minimum eigenvalue {lam_min:.3g})")
    return k


def k1_matrix(rewards: np.ndarray, r_max: float = 1.0, r_min: float = -1.0) -> np.ndarray:
    """Short-term reward similarity ``1 - |r_i - r_j| / |r_max - r_min|``."""
    if r_max == r_min:
        raise DegenerateRangeError("reward bounds must differ")
    r = np.asarray(rewards, dtype=float)
    lo, hi = min(r_min, r_max), max(r_min, r_max)
    if np.any(r < lo) or np.any(r > hi):
        raise ValidationError(f"rewards must lie within [{lo}, {hi}]")
    return 1.0 - np.abs(r[:, None] - r[None, :]) / abs(r_max - r_min)


def apply_krope_operator(k: np.ndarray, k1: np.ndarray, p_pi: np.ndarray,
                         gamma: float) -> np.ndarray:
    """One application of the KROPE operator, ``K1 + gamma * P K P^T``."""
    k1 = _square("k1", k1)
    n = k1.shape[0]
    k = _square("k", k, n)
    p_pi = _square("p_pi", p_pi, n)
    out = k1 + gamma * (p_pi @ k @ p_pi.T)
    return 0.5 * (out + out.T)


def krope_fixed_point(k1: np.ndarray, p_pi: np.ndarray, gamma: float, tol: float = 1e-10,
                      max_iters: int | None = None, k0: np.ndarray | None = None) -> np.ndarray:
    """Iterate the KROPE operator from ``k0`` (zero by default) to a fixed point.

    Stops once the sup-norm change of an iterate falls to ``tol``; the
    residual of the returned kernel is then at most ``gamma * tol``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError("the fixed point requires gamma in [0, 1)")
    k1 = _square("k1", k1)
    if max_iters is None:
        max_iters = 100 if gamma == 0 else 10 * math.ceil(math.log(tol * (1 - gamma)) / math.log(gamma)) + 100
    k = np.zeros_like(k1) if k0 is None else _square("k0", k0, k1.shape[0])
    for _ in range(max_iters):
        nxt = apply_krope_operator(k, k1, p_pi, gamma)
        if np.max(np.abs(nxt - k)) <= tol:
            return nxt
        k = nxt
    raise ConvergenceError(f"KROPE iteration did not reach tol={tol} in {max_iters} iterations")


def krope_kernel(mdp, pi, tol: float = 1e-10) -> np.ndarray:
    """Exact KROPE kernel of an MDP under policy ``pi``."""
    from kropelab.mdp import continuation_matrix

    k1 = k1_matrix(mdp.rewards, mdp.r_max, mdp.r_min)
    return krope_fixed_point(k1, continuation_matrix(mdp, pi), mdp.gamma, tol=tol)


def d_krope(k: np.ndarray, psd_tolerance: float = PSD_TOLERANCE) -> np.ndarray:
    """Induced squared distance ``k(x,x) + k(y,y) - 2 k(x,y)``, clamped at zero."""
    k = validate_kernel(k, psd_tolerance)
    diag = np.diag(k)
    d = diag[:, None] + diag[None, :] - 2.0 * k
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def mmd_squared(k: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Squared maximum mean discrepancy between distributions ``p`` and ``q``."""
    k = _square("kernel", k)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (k.shape[0],) or q.shape != (k.shape[0],):
        raise DimensionError("distributions must match the kernel size")
    for v in (p, q):
        if abs(v.sum() - 1.0) > 1e-9 or np.any(v < -1e-12):
            raise ValidationError("arguments must be probability vectors")
    delta = p - q
    value = float(delta @ k @ delta)
    if value < -1e-12 * max(1.0, float(np.max(np.abs(k)))):
        raise ValidationError(f"negative MMD^2 {value:.3g}; kernel is not PSD")
    return max(value, 0.0)


def factorize_kernel(k: np.ndarray, rank_tol: float = 1e-10, max_rank: int | None = None,
                     psd_tolerance: float = PSD_TOLERANCE) -> np.ndarray:
    """Feature matrix ``Phi`` with ``Phi @ Phi.T`` reproducing ``k``.

    Eigenvalues below ``rank_tol * lambda_max`` are dropped; ``max_rank``
    keeps only the leading eigenpairs. Columns are ordered by decreasing
    eigenvalue and each eigenvector's sign is fixed so its largest-magnitude
    entry is positive.
    """
    k = validate_kernel(k, psd_tolerance)
    lam, vec = np.linalg.eigh(k)
    lam, vec = lam[::-1], vec[:, ::-1]
    lam_max = max(lam[0], 0.0)
    keep = lam > rank_tol * lam_max if lam_max > 0 else np.zeros_like(lam, dtype=bool)
    if not keep.any():
        return np.zeros((k.shape[0], 1))
    lam, vec = lam[keep], vec[:, keep]
    if max_rank is not None:
        lam, vec = lam[:max_rank], vec[:, :max_rank]
    pivot = np.argmax(np.abs(vec), axis=0)
    vec = vec * np.sign(vec[pivot, np.arange(vec.shape[1])])
    return vec * np.sqrt(lam)


@dataclass(frozen=True)
class Abstraction:
    """Partition of state-actions into groups of near-zero KROPE distance."""

    labels: np.ndarray
    tolerance: float
    max_within_distance: float

    @property
    def n_groups(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == g) for g in range(self.n_groups)]

    def membership(self) -> np.ndarray:
        """``|X| x n_groups`` 0/1 indicator matrix."""
        s = np.zeros((self.labels.size, self.n_groups))
        s[np.arange(self.labels.size), self.labels] = 1.0
        return s


def bisim_partition(d: np.ndarray, tol: float = 1e-8) -> Abstraction:
    """Transitive closure of the relation ``d(x, y) <= tol``.

    Labels are numbered in order of each group's smallest member.
    """
    d = _square("distance", d)
    _, raw = connected_components(d <= tol, directed=False)
    _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first)] = np.arange(first.size)
    labels = rank[inverse]
    same = labels[:, None] == labels[None, :]
    within = float(np.max(np.where(same, d, 0.0), initial=0.0))
    return Abstraction(labels, tol, within)


@dataclass(frozen=True)
class ValueBound:
    """Pairwise value-gap bound ``|q(x) - q(y)| <= d(x, y) + C(x, y) + tail``."""

    value_gap: np.ndarray
    distance: np.ndarray
    constant: np.ndarray
    tail: float

    @property
    def slack(self) -> np.ndarray:
        return self.distance + self.constant + self.tail - self.value_gap

    def holds(self, atol: float = 1e-8) -> bool:
        return bool(np.all(self.slack >= -atol))


def value_gap_bound(p_pi: np.ndarray, rewards: np.ndarray, gamma: float, k: np.ndarray,
                   q: np.ndarray, truncation_n: int = 2000) -> ValueBound:
    """Evaluate the KROPE value-gap bound at the converged kernel ``k``.

    ``C(x, y) = 1/2 * sum_{n<=N} gamma^n (Delta_n(x) + Delta_n(y))`` where
    ``Delta_n(x)`` is the expected reward gap between two independent
    successors of the state-action reached after ``n`` steps from ``x``.
    The remainder beyond ``N`` is bounded by ``2 gamma^(N+1) / (1 - gamma)``.
    """
    p_pi = _square("p_pi", p_pi)
    r = np.asarray(rewards, dtype=float)
    gap = np.abs(r[:, None] - r[None, :])
    delta = np.einsum("iu,uv,iv->i", p_pi, gap, p_pi)
    acc = np.zeros_like(delta)
    term = delta.copy()
    weight = 1.0
    for _ in range(truncation_n + 1):
        acc += weight * term
        term = p_pi @ term
        weight *= gamma
        if weight == 0.0:
            break
    tail = 0.0 if gamma == 0 else 2.0 * gamma ** (truncation_n + 1) / (1.0 - gamma)
    q = np.asarray(q, dtype=float)
    return ValueBound(np.abs(q[:, None] - q[None, :]), d_krope(k),
                      0.5 * (acc[:, None] + acc[None, :]), tail)


def empirical_krope_targets(k_next: np.ndarray, rewards: np.ndarray, next_dist: np.ndarray,
                            gamma: float, r_max: float = 1.0, r_min: float = -1.0) -> np.ndarray:
    """KROPE operator applied over dataset rows.

    ``next_dist[i]`` is the successor state-action distribution of row
    ``i`` (zero rows for terminations) and ``k_next`` a kernel over the full
    state-action space. Entry ``(i, j)`` is the regression target the
    learning loss assigns to the row pair ``(i, j)``.
    """
    return k1_matrix(rewards, r_max, r_min) + gamma * next_dist @ k_next @ next_dist.T
