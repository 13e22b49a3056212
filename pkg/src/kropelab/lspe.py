"""Least-squares policy evaluation under the linear evaluation protocol.

The iteration is ``theta <- pinv(Phi^T Phi) Phi^T (r + gamma Phi_next theta)``
with all expectations taken as dataset means; ``Phi_next`` holds expected
successor features under the target policy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from kropelab.errors import DimensionError, RankDeficiencyWarning
from kropelab.mdp import OfflineDataset, Policy

PINV_RCOND = 1e-10
DIVERGENCE_THRESHOLD = 1e12
CONVERGED, MAXED, DIVERGED = "converged", "maxed", "diverged"


def expected_next_features(features: np.ndarray, dataset: OfflineDataset, pi_e: Policy,
                           terminal_mask: np.ndarray | None = None) -> np.ndarray:
    """``E_{a' ~ pi_e}[phi(s', a')]`` for every dataset row (zero at terminal ``s'``)."""
    per_state = np.einsum("sa,sak->sk", pi_e.probs,
                          features.reshape(dataset.n_states, dataset.n_actions, -1))
    if terminal_mask is not None:
        per_state = per_state * ~np.asarray(terminal_mask, dtype=bool)[:, None]
    return per_state[dataset.next_states]


@dataclass(frozen=True)
class LspeProblem:
    phi: np.ndarray
    phi_next: np.ndarray
    rewards: np.ndarray
    gamma: float
    _iteration: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        phi_next = np.atleast_2d(np.asarray(self.phi_next, dtype=float))
        rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        if phi.shape != phi_next.shape or phi.shape[0] != rewards.shape[0]:
            raise DimensionError(
                f"phi {phi.shape}, phi_next {phi_next.shape} and rewards {rewards.shape} disagree")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(phi_next))):
            raise DimensionError("features must be finite")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "phi_next", phi_next)
        object.__setattr__(self, "rewards", rewards)
        m = phi.shape[0]
        cov_pinv = np.linalg.pinv(phi.T @ phi / m, rcond=PINV_RCOND, hermitian=True)
        offset = cov_pinv @ (phi.T @ rewards) / m
        gain = cov_pinv @ (self.gamma * phi.T @ phi_next) / m
        object.__setattr__(self, "_iteration", (offset, gain))

    @classmethod
    def from_features(cls, features: np.ndarray, dataset: OfflineDataset, pi_e: Policy, gamma: float,
                      terminal_mask: np.ndarray | None = None) -> "LspeProblem":
        """Problem for a representation given as one feature row per state-action."""
        features = np.asarray(features, dtype=float)
        return cls(features[dataset.sa], expected_next_features(features, dataset, pi_e, terminal_mask),
                   dataset.rewards, gamma)

    @classmethod
    def exact(cls, features: np.ndarray, mdp, pi_e: Policy,
              weights: np.ndarray | None = None) -> "LspeProblem":
        """Problem over every state-action with exact successor expectations.

        Rows are scaled by ``sqrt(weights)`` so that the least-squares
        fits are weighted by ``weights`` (uniform by default).
        """
        from kropelab.mdp import continuation_matrix

        features = np.asarray(features, dtype=float)
        scale = np.ones(mdp.n_sa) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
        p = continuation_matrix(mdp, pi_e)
        return cls(scale[:, None] * features, scale[:, None] * (p @ features),
                   scale * mdp.rewards, mdp.gamma)

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    @property
    def iteration_matrix(self) -> np.ndarray:
        return self._iteration[1]


def lspe_iterate(problem: LspeProblem, theta: np.ndarray) -> np.ndarray:
    offset, gain = problem._iteration
    return offset + gain @ theta


@dataclass(frozen=True)
class LspeResult:
    theta: np.ndarray
    status: str
    iterations: int
    trace: list[tuple[int, float, float]]

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def lspe_solve(problem: LspeProblem, theta0: np.ndarray | None = None, max_iters: int = 10_000,
               tol: float = 1e-10, record_trace: bool = True) -> LspeResult:
    """Iterate until ``||theta_{t+1} - theta_t||_inf <= tol``, divergence, or ``max_iters``."""
    theta = np.zeros(problem.dim) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    trace = []
    status = MAXED
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, max_iters + 1):
            nxt = lspe_iterate(problem, theta)
            delta = float(np.max(np.abs(nxt - theta)))
            size = float(np.max(np.abs(nxt)))
            if record_trace:
                trace.append((t, size, delta))
            theta = nxt
            if not np.isfinite(size) or size > DIVERGENCE_THRESHOLD:
                status = DIVERGED
                break
            if delta <= tol:
                status = CONVERGED
                break
    return LspeResult(theta, status, t, trace)


def td_fixed_point(problem: LspeProblem) -> np.ndarray:
    """Solve ``(Phi^T Phi - gamma Phi^T Phi_next) theta = Phi^T r`` by pseudo-inverse.

    Emits :class:`RankDeficiencyWarning` when the system matrix has singular
    values below the cutoff.
    """
    phi, m = problem.phi, problem.phi.shape[0]
    a = (phi.T @ phi - problem.gamma * phi.T @ problem.phi_next) / m
    s = np.linalg.svd(a, compute_uv=False)
    if s.size and s[-1] <= PINV_RCOND * s[0]:
        warnings.warn(f"TD system is rank deficient (rank {int(np.sum(s > PINV_RCOND * s[0]))} "
                      f"of {s.size})", RankDeficiencyWarning, stacklevel=2)
    return np.linalg.pinv(a, rcond=PINV_RCOND) @ (phi.T @ problem.rewards / m)
