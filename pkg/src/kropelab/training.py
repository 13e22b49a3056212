"""Minibatch training loops for KROPE, FQE (+ auxiliary tasks) and BCRL encoders.

Randomness is split into independent streams spawned from the config seed
(encoder init, head init, minibatch order, next-action sampling), so
objectives that differ only in which terms are active consume identical
random numbers. Every epoch draws two permutations, one per side of the
pair, whether or not the objective uses pairs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from kropelab.encoders import BcrlHeads, FqeHead, LinearEncoder, make_optimizer
from kropelab.errors import ParameterError, ValidationError
from kropelab.losses import (
    Batch,
    TransitionTable,
    bcrl_losses,
    beer_penalty,
    dr3_penalty,
    fqe_loss,
    krope_pair_loss,
)

AUX_KINDS = ("none", "krope", "dr3", "beer")
OK, DIVERGED = "ok", "diverged"


@dataclass(frozen=True)
class TrainingConfig:
    latent_dim: int = 20
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 256
    aux_weight: float = 0.1
    target_update_period: int = 1
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    head_learning_rate: float = 1e-4
    logdet_coeff: float = 0.0
    beer_floor: float = 0.0
    use_bias: bool = True
    sample_next_actions: bool = False
    pairing: str = "zip"
    divergence_threshold: float = 1e12

    def __post_init__(self):
        if self.learning_rate <= 0 or self.head_learning_rate <= 0:
            raise ParameterError("learning rates must be positive")
        if not 0.0 <= self.aux_weight <= 1.0:
            raise ParameterError("aux_weight must lie in [0, 1]")
        if min(self.latent_dim, self.epochs, self.batch_size, self.target_update_period) < 1:
            raise ParameterError("latent_dim, epochs, batch_size and target_update_period must be positive")
        if self.pairing not in ("zip", "all_pairs"):
            raise ParameterError(f"unknown pairing {self.pairing!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **changes) -> "TrainingConfig":
        return TrainingConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    aux_loss: float
    param_norm: float
    status: str


@dataclass
class TrainingResult:
    encoder: LinearEncoder
    trace: list[EpochRecord]
    head: FqeHead | None = None
    bcrl_heads: BcrlHeads | None = None
    weight_history: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def status(self) -> str:
        return self.trace[-1].status if self.trace else OK

    @property
    def diverged(self) -> bool:
        return self.status == DIVERGED

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


class _Streams:
    def __init__(self, seed: int):
        enc, head, batch, action = np.random.SeedSequence(seed).spawn(4)
        self.encoder = np.random.default_rng(enc)
        self.head = np.random.default_rng(head)
        self.batch = np.random.default_rng(batch)
        self.action = np.random.default_rng(action)


def _pair_indices(m1: int, m2: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    first = rng.permutation(m1)
    second = rng.permutation(m2)
    if m2 < m1:
        second = np.resize(second, m1)
    return first, second[:m1]


def _check_tables(*tables: TransitionTable) -> None:
    for t in tables:
        if len(t) == 0:
            raise ValidationError("cannot train on an empty dataset")


def _train(kind: str, table: TransitionTable, config: TrainingConfig, gamma: float,
           r_bounds: tuple[float, float], paired: TransitionTable | None, aux_kind: str,
           aux_weight: float, record_weights: bool) -> TrainingResult:
    _check_tables(table)
    paired = table if paired is None else paired
    _check_tables(paired)
    rngs = _Streams(config.seed)
    encoder = LinearEncoder.init(table.inputs.shape[1] - 1, config.latent_dim, rngs.encoder,
                                 config.use_bias)
    target_encoder = encoder.copy()
    head = target_head = bcrl_heads = None
    if kind == "fqe":
        head = FqeHead.init(config.latent_dim, rngs.head)
        target_head = head.copy()
    elif kind == "bcrl":
        bcrl_heads = BcrlHeads.init(config.latent_dim, rngs.head)

    opt = dict(kind=config.optimizer, weight_decay=config.weight_decay, beta1=config.beta1,
               beta2=config.beta2)
    enc_opt = make_optimizer(lr=config.learning_rate, **opt)
    head_lr = config.head_learning_rate if kind == "bcrl" else config.learning_rate
    head_opt = make_optimizer(lr=head_lr, **opt)
    use_fqe = kind == "fqe" and aux_weight < 1.0
    use_aux = (kind == "krope") or (kind == "fqe" and aux_kind != "none" and aux_weight > 0.0)
    action_rng = rngs.action if config.sample_next_actions else None

    trace: list[EpochRecord] = []
    history = [encoder.weights.copy()] if record_weights else []
    m, bs = len(table), config.batch_size
    for epoch in range(config.epochs):
        first, second = _pair_indices(m, len(paired), rngs.batch)
        tot_sum = aux_sum = 0.0
        steps = 0
        status = OK
        for start in range(0, m, bs):
            i1, i2 = first[start:start + bs], second[start:start + bs]
            if config.pairing == "all_pairs":
                i1, i2 = np.repeat(i1, len(i2)), np.tile(i2, len(i1))
            b1 = table.take(i1, action_rng)
            with np.errstate(over="ignore", invalid="ignore"):
                total, aux, grads = _objective(kind, aux_kind, aux_weight, use_fqe, use_aux,
                                               encoder, target_encoder, head, target_head, bcrl_heads,
                                               b1, paired, i2, action_rng, gamma, r_bounds, config)
                params = [encoder.weights]
                if head is not None:
                    params.append(head.w)
                if bcrl_heads is not None:
                    enc_opt.step([encoder.weights], grads[:1])
                    head_opt.step([bcrl_heads.M, bcrl_heads.rho], grads[1:])
                    params += [bcrl_heads.M, bcrl_heads.rho]
                else:
                    enc_opt.step(params[:1], grads[:1])
                    if head is not None and len(grads) > 1:
                        head_opt.step(params[1:], grads[1:])
                norm = float(np.sqrt(sum(np.sum(p * p) for p in params)))
            tot_sum += total
            aux_sum += aux
            steps += 1
            limit = config.divergence_threshold
            if not (np.isfinite(total) and np.isfinite(norm)) or total > limit or norm > limit:
                status = DIVERGED
                break
        trace.append(EpochRecord(epoch + 1, tot_sum / steps, aux_sum / steps, norm, status))
        if record_weights:
            history.append(encoder.weights.copy())
        if status == DIVERGED:
            break
        if (epoch + 1) % config.target_update_period == 0:
            target_encoder = encoder.copy()
            if head is not None:
                target_head = head.copy()
    return TrainingResult(encoder, trace, head, bcrl_heads, history)


def _objective(kind, aux_kind, aux_weight, use_fqe, use_aux, encoder, target_encoder, head,
               target_head, bcrl_heads, b1: Batch, paired: TransitionTable, i2, action_rng,
               gamma, r_bounds, config):
    if kind == "bcrl":
        terms, g_enc, g_m, g_rho = bcrl_losses(encoder, bcrl_heads, target_encoder, b1, gamma,
                                               config.logdet_coeff)
        return terms.total, -config.logdet_coeff * terms.logdet, [g_enc, g_m, g_rho]
    if kind == "krope":
        b2 = paired.take(i2, action_rng)
        loss, g = krope_pair_loss(encoder, target_encoder, (b1, b2), gamma, r_bounds)
        return loss, loss, [g]

    total = aux = 0.0
    g_enc = np.zeros_like(encoder.weights)
    g_head = np.zeros_like(head.w)
    if use_aux:
        if aux_kind == "krope":
            b2 = paired.take(i2, action_rng)
            aux, g = krope_pair_loss(encoder, target_encoder, (b1, b2), gamma, r_bounds)
        elif aux_kind == "dr3":
            aux, g = dr3_penalty(encoder, b1)
        else:
            aux, g = beer_penalty(encoder, b1, config.beer_floor)
        total = aux_weight * aux
        g_enc = aux_weight * g
    if use_fqe:
        loss, ge, gw = fqe_loss(encoder, head, target_encoder, target_head, b1, gamma)
        if use_aux:
            total += (1.0 - aux_weight) * loss
            g_enc = g_enc + (1.0 - aux_weight) * ge
            g_head = (1.0 - aux_weight) * gw
        else:
            total, g_enc, g_head = loss, ge, gw
    return total, aux, [g_enc, g_head]


def train_krope(table: TransitionTable, config: TrainingConfig, gamma: float,
                r_bounds: tuple[float, float] = (-1.0, 1.0), paired: TransitionTable | None = None,
                record_weights: bool = False) -> TrainingResult:
    """Semi-gradient KROPE training; pairs zip one row of ``table`` with one of ``paired``."""
    return _train("krope", table, config, gamma, r_bounds, paired, "krope", 1.0, record_weights)


def train_auxiliary(table: TransitionTable, config: TrainingConfig, gamma: float, aux_kind: str = "none",
                    r_bounds: tuple[float, float] = (-1.0, 1.0), paired: TransitionTable | None = None,
                    record_weights: bool = False) -> TrainingResult:
    """FQE with an auxiliary representation loss: ``alpha * aux + (1 - alpha) * fqe``."""
    if aux_kind not in AUX_KINDS:
        raise ParameterError(f"unknown auxiliary task {aux_kind!r}; expected one of {AUX_KINDS}")
    return _train("fqe", table, config, gamma, r_bounds, paired, aux_kind, config.aux_weight,
                  record_weights)


def train_bcrl(table: TransitionTable, config: TrainingConfig, gamma: float,
               record_weights: bool = False) -> TrainingResult:
    """BCRL: reward and self-prediction heads, plus a log-det bonus when ``logdet_coeff > 0``."""
    return _train("bcrl", table, config, gamma, (-1.0, 1.0), None, "none", 0.0, record_weights)
