"""Representation diagnostics: stability, conditioning, realizability and generalization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from kropelab.errors import DimensionError

PINV_RCOND = 1e-10
CONDITION_CUTOFF = 1e-14


def stability_spectral_radius(phi: np.ndarray, phi_next: np.ndarray, gamma: float) -> float:
    """Largest eigenvalue magnitude of ``pinv(Phi^T Phi) gamma Phi^T Phi_next``."""
    phi = np.atleast_2d(phi)
    phi_next = np.atleast_2d(phi_next)
    if phi.shape != phi_next.shape:
        raise DimensionError(f"phi {phi.shape} and phi_next {phi_next.shape} differ")
    if gamma == 0:
        return 0.0
    a = np.linalg.pinv(phi.T @ phi, rcond=PINV_RCOND, hermitian=True) @ (gamma * phi.T @ phi_next)
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def condition_number(phi: np.ndarray) -> float:
    """``sigma_max / sigma_min`` of the feature covariance; ``inf`` when numerically singular."""
    phi = np.atleast_2d(phi)
    s = np.linalg.svd(phi.T @ phi / phi.shape[0], compute_uv=False)
    if s[0] == 0 or s[-1] < CONDITION_CUTOFF * s[0]:
        return math.inf
    return float(s[0] / s[-1])


def feature_coadaptation(phi: np.ndarray, phi_next: np.ndarray) -> float:
    """Mean dot product between each row's features and its expected successor features."""
    return float(np.mean(np.einsum("ij,ij->i", phi, phi_next)))


def realizability_error(phi_all: np.ndarray, q_exact: np.ndarray) -> float:
    """Least-squares residual ``||Phi w - q||^2`` divided by the mean absolute value."""
    q = np.asarray(q_exact, dtype=float)
    w = np.linalg.pinv(phi_all, rcond=PINV_RCOND) @ q
    err = float(np.sum((phi_all @ w - q) ** 2))
    scale = float(np.mean(np.abs(q)))
    return err / scale if scale > 0 else err


@dataclass(frozen=True)
class Correlation:
    value: float
    degenerate: bool
    excluded_rows: int
    n_pairs: int


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; ``(0.0, True)`` when either side has (numerically) zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return 0.0, True
    dx, dy = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if nx <= 1e-12 * max(1.0, np.max(np.abs(x))) * np.sqrt(x.size) or \
            ny <= 1e-12 * max(1.0, np.max(np.abs(y))) * np.sqrt(y.size):
        return 0.0, True
    return float(np.clip(dx @ dy / (nx * ny), -1.0, 1.0)), False


def ortho_value_correlation(phi_all: np.ndarray, q_exact: np.ndarray) -> Correlation:
    """Correlation between pairwise feature orthogonality and absolute value gaps.

    Orthogonality is ``1 - |<phi(x), phi(y)>| / (||phi(x)|| ||phi(y)||)`` over
    unordered pairs of distinct rows; zero-norm rows are left out.
    """
    phi_all = np.atleast_2d(phi_all)
    q = np.asarray(q_exact, dtype=float)
    norms = np.linalg.norm(phi_all, axis=1)
    keep = norms > 1e-12 * max(1.0, float(norms.max(initial=0.0)))
    unit = phi_all[keep] / norms[keep, None]
    iu = np.triu_indices(unit.shape[0], k=1)
    ortho = 1.0 - np.abs(unit @ unit.T)[iu]
    gap = np.abs(q[keep][:, None] - q[keep][None, :])[iu]
    value, degenerate = pearson(ortho, gap)
    return Correlation(value, degenerate, int(np.sum(~keep)), int(ortho.size))


def msve(q_hat: np.ndarray, q_exact: np.ndarray, weights: np.ndarray | None = None) -> float:
    err = (np.asarray(q_hat, dtype=float) - np.asarray(q_exact, dtype=float)) ** 2
    if weights is None:
        return float(np.mean(err))
    w = np.asarray(weights, dtype=float)
    return float(w @ err / w.sum())


def normalized_msve(q_hat: np.ndarray, q_exact: np.ndarray, q_random: np.ndarray,
                    weights: np.ndarray | None = None) -> float:
    """MSVE relative to that of the uniform-random policy's values."""
    return msve(q_hat, q_exact, weights) / msve(q_random, q_exact, weights)


def bc_proxy_loss(phi: np.ndarray, phi_next: np.ndarray, rewards: np.ndarray, gamma: float) -> float:
    """Bellman-completeness proxy at its least-squares optimum.

    Fits ``M`` with ``M phi ~ gamma * phi_next`` and ``rho`` with
    ``rho^T phi ~ r``; returns the mean over rows of the stacked squared
    residual.
    """
    phi = np.atleast_2d(phi)
    targets = np.hstack([gamma * np.atleast_2d(phi_next), np.asarray(rewards, dtype=float)[:, None]])
    coef = np.linalg.pinv(phi, rcond=PINV_RCOND) @ targets
    return float(np.sum((phi @ coef - targets) ** 2) / phi.shape[0])


@dataclass(frozen=True)
class DiagnosticsReport:
    spectral_radius: float
    is_stable: bool
    condition_number: float
    coadaptation: float
    realizability_error: float
    ortho_value_correlation: float
    correlation_degenerate: bool
    msve_normalized: float
    bc_proxy_loss: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return list(asdict(self).values())


def diagnose(phi: np.ndarray, phi_next: np.ndarray, rewards: np.ndarray, gamma: float,
             phi_all: np.ndarray, q_exact: np.ndarray, msve_normalized: float = math.nan
             ) -> DiagnosticsReport:
    """Full report for one representation.

    ``phi``/``phi_next``/``rewards`` describe the evaluation rows (dataset
    rows, or every state-action in exact mode); ``phi_all``/``q_exact`` cover
    the whole state-action space.
    """
    radius = stability_spectral_radius(phi, phi_next, gamma)
    corr = ortho_value_correlation(phi_all, q_exact)
    return DiagnosticsReport(
        spectral_radius=radius,
        is_stable=bool(radius < 1.0),
        condition_number=condition_number(phi),
        coadaptation=feature_coadaptation(phi, phi_next),
        realizability_error=realizability_error(phi_all, q_exact),
        ortho_value_correlation=corr.value,
        correlation_degenerate=corr.degenerate,
        msve_normalized=msve_normalized,
        bc_proxy_loss=bc_proxy_loss(phi, phi_next, rewards, gamma),
    )
