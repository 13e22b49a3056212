"""Linear encoders, value/prediction heads, and the optimizers that train them.

An encoder maps a native input row ``x`` (one-hot state-action for Garnet
problems, hand-built features for the counterexample) to ``W [x; 1]``; the
last weight column is the bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kropelab.errors import DimensionError, ParameterError


def augment(inputs: np.ndarray) -> np.ndarray:
    """Append the constant bias input to every row."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    return np.hstack([inputs, np.ones((inputs.shape[0], 1))])


def _torch_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearEncoder:
    """Affine map ``phi(x) = W[:, :-1] x + W[:, -1]``."""

    weights: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1 or self.weights.shape[1] < 2:
            raise DimensionError(f"encoder weights must be d x (n_inputs + 1), got {self.weights.shape}")
        if not self.use_bias:
            self.weights[:, -1] = 0.0

    @classmethod
    def init(cls, n_inputs: int, dim: int, rng: np.random.Generator,
             use_bias: bool = True) -> "LinearEncoder":
        """Uniform ``+-1/sqrt(fan_in)`` initialization, as in common deep-learning defaults."""
        if dim < 1 or n_inputs < 1:
            raise ParameterError("encoder sizes must be positive")
        return cls(_torch_uniform(rng, (dim, n_inputs + 1), n_inputs), use_bias)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[1] - 1

    def features(self, aug_inputs: np.ndarray) -> np.ndarray:
        """Features of already-augmented input rows."""
        return aug_inputs @ self.weights.T

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return self.features(augment(inputs))

    def mask_gradient(self, grad: np.ndarray) -> np.ndarray:
        if not self.use_bias:
            grad = grad.copy()
            grad[:, -1] = 0.0
        return grad

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(self.weights.copy(), self.use_bias)


@dataclass
class FqeHead:
    """Linear value head ``q = phi^T w``."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float).reshape(-1)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "FqeHead":
        return cls(_torch_uniform(rng, (dim,), dim))

    def copy(self) -> "FqeHead":
        return FqeHead(self.w.copy())


@dataclass
class BcrlHeads:
    """Next-feature predictor ``M`` and reward predictor ``rho``."""

    M: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.M = np.array(self.M, dtype=float)
        self.rho = np.array(self.rho, dtype=float).reshape(-1)
        d = self.rho.shape[0]
        if self.M.shape != (d, d):
            raise DimensionError(f"M must be {d} x {d}, got {self.M.shape}")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "BcrlHeads":
        return cls(_torch_uniform(rng, (dim, dim), dim), _torch_uniform(rng, (dim,), dim))

    def copy(self) -> "BcrlHeads":
        return BcrlHeads(self.M.copy(), self.rho.copy())


@dataclass
class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    _m: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)
    _t: int = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Sgd:
    """Plain gradient descent with optional decoupled weight decay."""

    lr: float = 1e-3
    weight_decay: float = 0.0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * g


def make_optimizer(kind: str, lr: float, weight_decay: float, beta1: float = 0.9,
                   beta2: float = 0.999):
    if kind == "adamw":
        return AdamW(lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay)
    if kind == "sgd":
        return Sgd(lr=lr, weight_decay=weight_decay)
    raise ParameterError(f"unknown optimizer {kind!r}")
