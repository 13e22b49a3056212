"""Representation-learning objectives with closed-form gradients.

All losses act on :class:`Batch` objects whose rows carry augmented inputs
(native input plus a trailing 1), rewards, and the expected augmented input
of the successor under the target policy. Because the encoder is linear,
the expected successor feature is simply the encoder applied to that
expected input; terminating rows carry a zero successor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kropelab.encoders import BcrlHeads, FqeHead, LinearEncoder, augment
from kropelab.errors import DegenerateRangeError, DimensionError, ValidationError
from kropelab.mdp import OfflineDataset, Policy

LOGDET_EPS = 1e-6


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    rewards: np.ndarray
    next_inputs: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass(frozen=True)
class TransitionTable:
    """Dataset rows pre-encoded for training.

    ``sa_inputs`` holds one native input row per flat state-action. The
    expected successor input is ``sum_a' pi_e(a'|s') [x(s', a'); 1]``.
    """

    inputs: np.ndarray
    rewards: np.ndarray
    next_inputs: np.ndarray
    next_states: np.ndarray
    sa_inputs: np.ndarray
    target_probs: np.ndarray
    live_next: np.ndarray

    @classmethod
    def build(cls, dataset: OfflineDataset, pi_e: Policy, sa_inputs: np.ndarray | None = None,
              terminal_mask: np.ndarray | None = None) -> "TransitionTable":
        n_sa = dataset.n_states * dataset.n_actions
        sa_inputs = np.eye(n_sa) if sa_inputs is None else np.asarray(sa_inputs, dtype=float)
        if sa_inputs.shape[0] != n_sa:
            raise DimensionError(f"need one input row per state-action ({n_sa}), got {sa_inputs.shape[0]}")
        if pi_e.probs.shape != (dataset.n_states, dataset.n_actions):
            raise DimensionError("target policy does not match the dataset's spaces")
        aug = augment(sa_inputs).reshape(dataset.n_states, dataset.n_actions, -1)
        per_state = np.einsum("sa,sak->sk", pi_e.probs, aug)
        live = np.ones(dataset.n_states, dtype=bool)
        if terminal_mask is not None:
            live = ~np.asarray(terminal_mask, dtype=bool)
        per_state = per_state * live[:, None]
        return cls(inputs=augment(sa_inputs)[dataset.sa], rewards=dataset.rewards.copy(),
                   next_inputs=per_state[dataset.next_states], next_states=dataset.next_states.copy(),
                   sa_inputs=aug, target_probs=pi_e.probs, live_next=live[dataset.next_states])

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def take(self, idx: np.ndarray, rng: np.random.Generator | None = None) -> Batch:
        """Rows ``idx``; with ``rng`` the next action is sampled instead of averaged."""
        if rng is None:
            return Batch(self.inputs[idx], self.rewards[idx], self.next_inputs[idx])
        s_next = self.next_states[idx]
        cdf = np.cumsum(self.target_probs[s_next], axis=1)
        u = rng.random(len(idx))
        a_next = np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)
        nxt = self.sa_inputs[s_next, a_next] * self.live_next[idx][:, None]
        return Batch(self.inputs[idx], self.rewards[idx], nxt)


def _check_nonempty(*batches: Batch) -> None:
    for b in batches:
        if len(b) == 0:
            raise ValidationError("empty batch")


def reward_similarity(r1: np.ndarray, r2: np.ndarray, r_bounds: tuple[float, float]) -> np.ndarray:
    r_min, r_max = r_bounds
    if r_max == r_min:
        raise DegenerateRangeError("reward bounds must differ")
    return 1.0 - np.abs(r1 - r2) / abs(r_max - r_min)


def krope_pair_loss(encoder: LinearEncoder, target_encoder: LinearEncoder, pair: tuple[Batch, Batch],
                    gamma: float, r_bounds: tuple[float, float] = (-1.0, 1.0)) -> tuple[float, np.ndarray]:
    """Mean squared KROPE residual over zipped row pairs and its semi-gradient."""
    b1, b2 = pair
    _check_nonempty(b1, b2)
    if len(b1) != len(b2):
        raise DimensionError("paired batches must have equal length")
    phi1, phi2 = encoder.features(b1.inputs), encoder.features(b2.inputs)
    target = reward_similarity(b1.rewards, b2.rewards, r_bounds)
    if gamma:
        psi1 = target_encoder.features(b1.next_inputs)
        psi2 = target_encoder.features(b2.next_inputs)
        target = target + gamma * np.einsum("ij,ij->i", psi1, psi2)
    delta = target - np.einsum("ij,ij->i", phi1, phi2)
    n = len(b1)
    coef = (-2.0 / n) * delta[:, None]
    grad = (coef * phi2).T @ b1.inputs + (coef * phi1).T @ b2.inputs
    return float(np.mean(delta ** 2)), encoder.mask_gradient(grad)


def fqe_loss(encoder: LinearEncoder, head: FqeHead, target_encoder: LinearEncoder,
             target_head: FqeHead, batch: Batch, gamma: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared TD error with a frozen target network; returns ``(loss, dW, dw)``."""
    _check_nonempty(batch)
    phi = encoder.features(batch.inputs)
    target = batch.rewards
    if gamma:
        target = target + gamma * target_encoder.features(batch.next_inputs) @ target_head.w
    delta = target - phi @ head.w
    dq = (-2.0 / len(batch)) * delta
    grad_w = phi.T @ dq
    grad_enc = np.outer(head.w, dq @ batch.inputs)
    return float(np.mean(delta ** 2)), encoder.mask_gradient(grad_enc), grad_w


def _coadaptation_terms(encoder: LinearEncoder, batch: Batch):
    phi = encoder.features(batch.inputs)
    psi = encoder.features(batch.next_inputs)
    return phi, psi, np.einsum("ij,ij->i", phi, psi)


def _through_dots(encoder: LinearEncoder, batch: Batch, phi, psi, dc) -> np.ndarray:
    grad = (dc[:, None] * psi).T @ batch.inputs + (dc[:, None] * phi).T @ batch.next_inputs
    return encoder.mask_gradient(grad)


def dr3_penalty(encoder: LinearEncoder, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean absolute co-adaptation ``|phi(s,a)^T E phi(s',a')|``."""
    _check_nonempty(batch)
    phi, psi, c = _coadaptation_terms(encoder, batch)
    dc = np.sign(c) / len(batch)
    return float(np.mean(np.abs(c))), _through_dots(encoder, batch, phi, psi, dc)


def beer_penalty(encoder: LinearEncoder, batch: Batch, floor: float = 0.0) -> tuple[float, np.ndarray]:
    """Squared hinge ``max(0, floor - phi^T psi)^2`` lower-bounding co-adaptation."""
    _check_nonempty(batch)
    phi, psi, c = _coadaptation_terms(encoder, batch)
    h = np.maximum(0.0, floor - c)
    dc = (-2.0 / len(batch)) * h
    return float(np.mean(h ** 2)), _through_dots(encoder, batch, phi, psi, dc)


@dataclass(frozen=True)
class BcrlTerms:
    reward: float
    self_prediction: float
    logdet: float
    logdet_coeff: float

    @property
    def total(self) -> float:
        return self.reward + self.self_prediction - self.logdet_coeff * self.logdet


def bcrl_losses(encoder: LinearEncoder, heads: BcrlHeads, target_encoder: LinearEncoder, batch: Batch,
                gamma: float, logdet_coeff: float = 0.0
                ) -> tuple[BcrlTerms, np.ndarray, np.ndarray, np.ndarray]:
    """Reward prediction, self-prediction, and log-det exploration terms.

    Returns the terms and the gradients of their total with respect to the
    encoder weights, ``M`` and ``rho``.
    """
    _check_nonempty(batch)
    n = len(batch)
    phi = encoder.features(batch.inputs)
    err_r = phi @ heads.rho - batch.rewards
    err_p = phi @ heads.M.T - gamma * target_encoder.features(batch.next_inputs)
    cov = phi.T @ phi / n + LOGDET_EPS * np.eye(encoder.dim)
    _, logdet = np.linalg.slogdet(cov)

    d_phi = (2.0 / n) * (np.outer(err_r, heads.rho) + err_p @ heads.M)
    if logdet_coeff:
        d_phi -= logdet_coeff * (2.0 / n) * np.linalg.solve(cov, phi.T).T
    grad_enc = encoder.mask_gradient(d_phi.T @ batch.inputs)
    grad_M = (2.0 / n) * err_p.T @ phi
    grad_rho = (2.0 / n) * phi.T @ err_r
    terms = BcrlTerms(float(np.mean(err_r ** 2)), float(np.sum(err_p ** 2) / n), float(logdet), logdet_coeff)
    return terms, grad_enc, grad_M, grad_rho
