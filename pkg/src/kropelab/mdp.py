"""Tabular MDP machinery: construction, policy-induced chains, exact values, datasets.

Every matrix indexed by state-actions uses the flat ordering
``i = s * n_actions + a`` (see :class:`StateActionIndex`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from kropelab.errors import (
    DimensionError,
    ParameterError,
    SingularSystemError,
    ValidationError,
)

STOCHASTIC_ATOL = 1e-12


@dataclass(frozen=True)
class StateActionIndex:
    """Bijection between ``(s, a)`` pairs and flat indices."""

    n_states: int
    n_actions: int

    @property
    def size(self) -> int:
        return self.n_states * self.n_actions

    def flat(self, s, a):
        return s * self.n_actions + a

    def unflat(self, i):
        return divmod(i, self.n_actions)


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP over ``n_states * n_actions`` state-actions.

    ``transitions[i]`` is ``P(. | s, a)`` for flat index ``i``. Terminal
    states self-loop with zero reward; their successors contribute nothing
    to values or kernels (see :func:`continuation_matrix`).
    """

    n_states: int
    n_actions: int
    rewards: np.ndarray
    transitions: np.ndarray
    gamma: float
    d0: np.ndarray
    terminal_mask: np.ndarray = None
    r_min: float = -1.0
    r_max: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        n_sa = self.n_states * self.n_actions
        rewards = np.asarray(self.rewards, dtype=float)
        transitions = np.asarray(self.transitions, dtype=float)
        d0 = np.asarray(self.d0, dtype=float)
        terminal = (np.zeros(self.n_states, dtype=bool) if self.terminal_mask is None
                    else np.asarray(self.terminal_mask, dtype=bool))
        if self.n_states < 1 or self.n_actions < 1:
            raise ParameterError("n_states and n_actions must be positive")
        if rewards.shape != (n_sa,):
            raise DimensionError(f"rewards must have shape ({n_sa},), got {rewards.shape}")
        if transitions.shape != (n_sa, self.n_states):
            raise DimensionError(
                f"transitions must have shape ({n_sa}, {self.n_states}), got {transitions.shape}")
        if d0.shape != (self.n_states,) or terminal.shape != (self.n_states,):
            raise DimensionError("d0 and terminal_mask must have one entry per state")
        if np.any(transitions < 0) or np.max(np.abs(transitions.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
            raise ValidationError("every transitions row must be a probability vector")
        if abs(d0.sum() - 1.0) > STOCHASTIC_ATOL or np.any(d0 < 0):
            raise ValidationError("d0 must be a probability vector")
        if not self.r_max > self.r_min:
            raise ParameterError("r_max must exceed r_min")
        if np.any(rewards < self.r_min) or np.any(rewards > self.r_max):
            raise ValidationError(f"rewards must lie in [{self.r_min}, {self.r_max}]")
        if not 0.0 <= self.gamma <= 1.0 or (self.gamma == 1.0 and not terminal.any()):
            raise ParameterError("gamma must lie in [0, 1); gamma = 1 requires terminal states")
        for s in np.flatnonzero(terminal):
            rows = slice(s * self.n_actions, (s + 1) * self.n_actions)
            if np.any(rewards[rows] != 0.0) or np.any(transitions[rows, s] != 1.0):
                raise ValidationError(f"terminal state {s} must self-loop with zero reward")
        for name, value in (("rewards", rewards), ("transitions", transitions), ("d0", d0),
                            ("terminal_mask", terminal)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_sa(self) -> int:
        return self.n_states * self.n_actions

    @property
    def index(self) -> StateActionIndex:
        return StateActionIndex(self.n_states, self.n_actions)

    @property
    def terminal_sa(self) -> np.ndarray:
        """Boolean mask over state-actions whose state is terminal."""
        return np.repeat(self.terminal_mask, self.n_actions)

    def to_dict(self) -> dict:
        return {
            "n_states": int(self.n_states),
            "n_actions": int(self.n_actions),
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
            "gamma": float(self.gamma),
            "d0": self.d0.tolist(),
            "terminal_mask": self.terminal_mask.tolist(),
            "r_min": float(self.r_min),
            "r_max": float(self.r_max),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMDP":
        return cls(
            n_states=int(data["n_states"]),
            n_actions=int(data["n_actions"]),
            rewards=np.array(data["rewards"], dtype=float),
            transitions=np.array(data["transitions"], dtype=float),
            gamma=float(data["gamma"]),
            d0=np.array(data["d0"], dtype=float),
            terminal_mask=np.array(data.get("terminal_mask") or [False] * int(data["n_states"])),
            r_min=float(data.get("r_min", -1.0)),
            r_max=float(data.get("r_max", 1.0)),
            seed=data.get("seed"),
        )


@dataclass(frozen=True)
class Policy:
    """Row-stochastic ``n_states x n_actions`` action distribution."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise DimensionError("policy probabilities must be a 2-d array")
        if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
            raise ValidationError("policy rows must be probability vectors")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def softmax(cls, q: np.ndarray, temperature: float) -> "Policy":
        """Boltzmann policy over a ``(n_states, n_actions)`` value table."""
        if temperature <= 0:
            raise ParameterError("temperature must be positive")
        z = np.asarray(q, dtype=float) / temperature
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return cls(e / e.sum(axis=1, keepdims=True))


def _check_policy(mdp: TabularMDP, pi: Policy) -> None:
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")


def pi_transition_matrix(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """State-action transition matrix ``P^pi`` of shape ``(|X|, |X|)``.

    Entry ``(i, j)`` is ``P(s_j | s_i, a_i) * pi(a_j | s_j)``.
    """
    _check_policy(mdp, pi)
    return (mdp.transitions[:, :, None] * pi.probs[None, :, :]).reshape(mdp.n_sa, mdp.n_sa)


def continuation_matrix(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """``P^pi`` with every transition into a terminal state-action removed.

    Identical to :func:`pi_transition_matrix` when the MDP has no terminal
    states. Rows are sub-stochastic where termination is possible.
    """
    p = pi_transition_matrix(mdp, pi)
    if mdp.terminal_mask.any():
        p = p * ~mdp.terminal_sa[None, :]
    return p


def exact_q(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """Action values of ``pi`` by a direct solve of ``(I - gamma P) q = r``."""
    p = continuation_matrix(mdp, pi)
    if mdp.gamma >= 1.0:
        radius = np.max(np.abs(np.linalg.eigvals(p)))
        if radius >= 1.0 - 1e-12:
            raise SingularSystemError(
                f"gamma = 1 requires absorption; continuation spectral radius is {radius:.6g}")
    try:
        return np.linalg.solve(np.eye(mdp.n_sa) - mdp.gamma * p, mdp.rewards)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc


def optimal_q(mdp: TabularMDP, tol: float = 1e-10, max_iters: int = 1_000_000) -> np.ndarray:
    """Optimal action values by value iteration, shape ``(n_states, n_actions)``."""
    if mdp.gamma >= 1.0:
        raise ParameterError("optimal_q requires gamma < 1")
    q = np.zeros(mdp.n_sa)
    live = (~mdp.terminal_mask).astype(float)
    for _ in range(max_iters):
        v = q.reshape(mdp.n_states, mdp.n_actions).max(axis=1) * live
        q_new = mdp.rewards + mdp.gamma * mdp.transitions @ v
        if np.max(np.abs(q_new - q)) <= tol:
            return q_new.reshape(mdp.n_states, mdp.n_actions)
        q = q_new
    raise ParameterError("value iteration did not converge")


def generate_garnet(n_states: int, n_actions: int, branching: int = 3, seed: int = 0,
                    gamma: float = 0.99) -> TabularMDP:
    """Random Garnet MDP.

    Each state-action reaches ``branching`` distinct next states drawn
    without replacement; their probabilities are the gaps between sorted
    uniform cut points. Rewards are i.i.d. uniform on ``[-1, 1]``.
    """
    if not 1 <= branching <= n_states:
        raise ParameterError(f"branching must lie in [1, {n_states}], got {branching}")
    rng = np.random.default_rng(seed)
    n_sa = n_states * n_actions
    transitions = np.zeros((n_sa, n_states))
    for i in range(n_sa):
        targets = rng.choice(n_states, size=branching, replace=False)
        cuts = np.sort(rng.uniform(size=branching - 1))
        transitions[i, targets] = np.diff(np.concatenate(([0.0], cuts, [1.0])))
    # guard exact row sums against accumulated rounding in np.diff
    transitions /= transitions.sum(axis=1, keepdims=True)
    rewards = rng.uniform(-1.0, 1.0, size=n_sa)
    return TabularMDP(n_states, n_actions, rewards, transitions, gamma,
                      np.full(n_states, 1.0 / n_states), seed=seed)


def garnet_policies(mdp: TabularMDP, temperature: float = 0.25) -> tuple[Policy, Policy]:
    """Default ``(behavior, target)`` pair: uniform behavior, softmax-optimal target."""
    behavior = Policy.uniform(mdp.n_states, mdp.n_actions)
    return behavior, Policy.softmax(optimal_q(mdp), temperature)


# Counterexample MRP: states 0..3 carry native features w1, w2, 2*w3, w3;
# state 4 is terminal. Chain: w1 -> w2 -> w3 -> 2w3, and 2w3 loops on itself
# with probability p_loop, otherwise terminates.
COUNTEREXAMPLE_FEATURES = np.array([[1.0, 0.0, 0.0],
                                    [0.0, 1.0, 0.0],
                                    [0.0, 0.0, 2.0],
                                    [0.0, 0.0, 1.0]])
COUNTEREXAMPLE_WEIGHTS = np.array([0.8, 1.0, 0.0])
COUNTEREXAMPLE_REWARDS = (-0.2, 1.0, 0.0, 0.0)
COUNTEREXAMPLE_P_LOOP = 0.5
W1, W2, TWO_W3, W3, TERMINAL = range(5)


def counterexample_mrp(p_loop: float = COUNTEREXAMPLE_P_LOOP,
                       rewards: Sequence[float] | None = None) -> tuple[TabularMDP, np.ndarray]:
    """Four-state absorbing MRP with fixed 3-d native features.

    Returns the MDP (5 states including the terminal one, 1 action,
    ``gamma = 1``) and the ``4 x 3`` native feature matrix of the
    non-terminal states. With default rewards the exact values are
    ``features @ [0.8, 1, 0] = [0.8, 1, 0, 0]``.
    """
    if not 0.0 <= p_loop < 1.0:
        raise ParameterError("p_loop must lie in [0, 1)")
    use_defaults = rewards is None
    r = np.array(COUNTEREXAMPLE_REWARDS if use_defaults else rewards, dtype=float)
    if r.shape != (4,):
        raise DimensionError("counterexample rewards must have length 4")
    transitions = np.zeros((5, 5))
    transitions[W1, W2] = 1.0
    transitions[W2, W3] = 1.0
    transitions[W3, TWO_W3] = 1.0
    transitions[TWO_W3, TWO_W3] = p_loop
    transitions[TWO_W3, TERMINAL] = 1.0 - p_loop
    transitions[TERMINAL, TERMINAL] = 1.0
    d0 = np.zeros(5)
    d0[W1] = 1.0
    mdp = TabularMDP(5, 1, np.append(r, 0.0), transitions, 1.0, d0,
                     terminal_mask=np.array([False] * 4 + [True]))
    if use_defaults:
        q = exact_q(mdp, Policy.uniform(5, 1))
        target = COUNTEREXAMPLE_FEATURES @ COUNTEREXAMPLE_WEIGHTS
        if np.max(np.abs(q[:4] - target)) > 1e-10:
            raise ValidationError("default counterexample parameters are not Bellman consistent")
    return mdp, COUNTEREXAMPLE_FEATURES.copy()


@dataclass(frozen=True)
class OfflineDataset:
    """Multiset of ``(s, a, r, s_next)`` transitions over a fixed state-action space."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    n_states: int
    n_actions: int
    seed: int | None = None
    mu: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arrays = [np.asarray(self.states, dtype=np.int64), np.asarray(self.actions, dtype=np.int64),
                  np.asarray(self.rewards, dtype=float), np.asarray(self.next_states, dtype=np.int64)]
        m = arrays[0].shape[0]
        if m == 0:
            raise ValidationError("a dataset needs at least one transition")
        if any(a.shape != (m,) for a in arrays):
            raise DimensionError("dataset columns must be 1-d and of equal length")
        s, a, _, s_next = arrays
        if (s.min() < 0 or s.max() >= self.n_states or s_next.min() < 0
                or s_next.max() >= self.n_states or a.min() < 0 or a.max() >= self.n_actions):
            raise ValidationError("dataset ids out of range")
        for name, value in zip(("states", "actions", "rewards", "next_states"), arrays):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        mu = np.bincount(self.sa, minlength=self.n_states * self.n_actions) / m
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def sa(self) -> np.ndarray:
        """Flat state-action index of each row."""
        return self.states * self.n_actions + self.actions

    def tuples(self) -> Iterator[tuple[int, int, float, int]]:
        for s, a, r, s2 in zip(self.states, self.actions, self.rewards, self.next_states):
            yield int(s), int(a), float(r), int(s2)

    def covers(self, pi: Policy) -> bool:
        """Whether every state-action with positive target probability appears."""
        return bool(np.all(self.mu[pi.probs.reshape(-1) > 0] > 0))

    def to_dict(self) -> dict:
        return {
            "n_states": int(self.n_states),
            "n_actions": int(self.n_actions),
            "seed": self.seed,
            "transitions": [list(t) for t in self.tuples()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OfflineDataset":
        rows = data["transitions"]
        return synthetic_dataset(rows, n_states=int(data["n_states"]),
                                 n_actions=int(data["n_actions"]), seed=data.get("seed"))

    @classmethod
    def concatenate(cls, parts: Sequence["OfflineDataset"]) -> "OfflineDataset":
        first = parts[0]
        return cls(np.concatenate([p.states for p in parts]),
                   np.concatenate([p.actions for p in parts]),
                   np.concatenate([p.rewards for p in parts]),
                   np.concatenate([p.next_states for p in parts]),
                   first.n_states, first.n_actions)


def stationary_distribution(p: np.ndarray, tol: float = 1e-10,
                            max_iters: int = 100_000) -> np.ndarray | None:
    """Stationary distribution of a row-stochastic chain by power iteration.

    Returns ``None`` when the chain is reducible or the iteration does not
    settle (periodic chains).
    """
    n_components, _ = connected_components(p > 0, directed=True, connection="strong")
    if n_components != 1:
        return None
    mu = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(max_iters):
        nxt = mu @ p
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - mu)) <= tol:
            return nxt
        mu = nxt
    return None


def sample_dataset(mdp: TabularMDP, behavior: Policy, size: int, seed: int) -> OfflineDataset:
    """I.i.d. transitions with ``(s, a)`` drawn from the behavior chain's stationary law.

    Falls back to the uniform law over state-actions when the chain is
    reducible or periodic.
    """
    if size < 1:
        raise ParameterError("dataset size must be at least 1")
    p = pi_transition_matrix(mdp, behavior)
    mu = stationary_distribution(p)
    if mu is None:
        mu = np.full(mdp.n_sa, 1.0 / mdp.n_sa)
    rng = np.random.default_rng(seed)
    return transitions_from(mdp, rng.choice(mdp.n_sa, size=size, p=mu), rng, seed)


def transitions_from(mdp: TabularMDP, sa: np.ndarray, rng: np.random.Generator,
                     seed: int | None = None) -> OfflineDataset:
    """One sampled transition for each flat state-action in ``sa``."""
    sa = np.asarray(sa, dtype=np.int64)
    cdf = np.cumsum(mdp.transitions[sa], axis=1)
    u = rng.random(sa.size)
    s_next = np.minimum((u[:, None] >= cdf).sum(axis=1), mdp.n_states - 1)
    s, a = np.divmod(sa, mdp.n_actions)
    return OfflineDataset(s, a, mdp.rewards[sa], s_next, mdp.n_states, mdp.n_actions, seed=seed)


def occupancy(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """Normalized expected visit counts of non-terminal state-actions in an absorbing MDP."""
    p = continuation_matrix(mdp, pi)
    start = np.repeat(mdp.d0, mdp.n_actions) * pi.probs.reshape(-1)
    visits = np.linalg.solve(np.eye(mdp.n_sa) - p.T, start) * ~mdp.terminal_sa
    return visits / visits.sum()


COUNTEREXAMPLE_OFF_STATES = {"w1": W1, "w2": W2, "w3": W3, "2w3": TWO_W3}


def counterexample_datasets(mdp: TabularMDP, seed: int, n_on_policy: int = 2000,
                            n_off_policy: int = 5000) -> tuple[OfflineDataset, dict[str, OfflineDataset]]:
    """``D1`` and the four ``D2`` variants of the pairing study.

    Every dataset holds ``n_on_policy`` transitions drawn from the
    on-policy occupancy plus ``n_off_policy`` transitions from one state:
    ``w3`` (the bad transition into ``2w3``) for ``D1``, the named state
    for each ``D2`` variant.
    """
    pi = Policy.uniform(mdp.n_states, 1)
    occ = occupancy(mdp, pi)
    rng = np.random.default_rng(seed)

    def build(state: int) -> OfflineDataset:
        sa = np.concatenate([rng.choice(mdp.n_sa, size=n_on_policy, p=occ),
                             np.full(n_off_policy, state)])
        return transitions_from(mdp, sa, rng, seed)

    d1 = build(W3)
    return d1, {name: build(state) for name, state in COUNTEREXAMPLE_OFF_STATES.items()}


def synthetic_dataset(tuples: Iterable[Sequence], mdp: TabularMDP | None = None, *,
                      n_states: int | None = None, n_actions: int | None = None,
                      seed: int | None = None) -> OfflineDataset:
    """Dataset from explicit ``(s, a, r, s_next)`` tuples, stored verbatim.

    When ``mdp`` is given, every reward is checked against it.
    """
    rows = [tuple(t) for t in tuples]
    if not rows:
        raise ValidationError("a dataset needs at least one transition")
    if mdp is not None:
        n_states, n_actions = mdp.n_states, mdp.n_actions
    if n_states is None or n_actions is None:
        raise ParameterError("n_states and n_actions are required without an MDP")
    s, a, r, s_next = (np.array(col) for col in zip(*rows))
    if mdp is not None:
        expected = mdp.rewards[s.astype(int) * n_actions + a.astype(int)]
        if np.any(np.abs(expected - r.astype(float)) > 1e-12):
            raise ValidationError("dataset rewards disagree with the MDP")
    return OfflineDataset(s, a, r, s_next, n_states, n_actions, seed=seed)
