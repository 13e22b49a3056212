import numpy as np
import pytest

from kropelab.encoders import AdamW, BcrlHeads, FqeHead, LinearEncoder, Sgd, augment, make_optimizer
from kropelab.errors import DegenerateRangeError, DimensionError, ParameterError, ValidationError
from kropelab.kernels import empirical_krope_targets
from kropelab.losses import (
    Batch,
    TransitionTable,
    bcrl_losses,
    beer_penalty,
    dr3_penalty,
    fqe_loss,
    krope_pair_loss,
    reward_similarity,
)
from kropelab.mdp import Policy, counterexample_mrp, synthetic_dataset

from gradcheck import gradient_errors, random_batch


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    errors = gradient_errors(seed)
    assert max(errors.values()) < 1e-4, errors


def test_encoder_affine_map():
    enc = LinearEncoder(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 1.0]]))
    np.testing.assert_allclose(enc(np.array([[1.0, 1.0]])), [[3.5, 0.0]])
    no_bias = LinearEncoder(enc.weights, use_bias=False)
    np.testing.assert_allclose(no_bias(np.array([[1.0, 1.0]])), [[3.0, -1.0]])
    g = no_bias.mask_gradient(np.ones((2, 3)))
    assert np.all(g[:, -1] == 0)


def test_encoder_init_bounds():
    enc = LinearEncoder.init(16, 5, np.random.default_rng(0))
    assert enc.weights.shape == (5, 17)
    assert np.max(np.abs(enc.weights)) <= 0.25
    with pytest.raises(DimensionError):
        LinearEncoder(np.ones(3))


def test_krope_loss_hand_computed():
    # identity-like features; one pair, gamma 0.5
    enc = LinearEncoder(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    b1 = Batch(augment([[1.0, 0.0]]), np.array([1.0]), augment([[0.0, 1.0]]))
    b2 = Batch(augment([[1.0, 1.0]]), np.array([0.0]), augment([[1.0, 1.0]]))
    loss, _ = krope_pair_loss(enc, enc, (b1, b2), 0.5)
    # target = 1 - 1/2 + 0.5 * <(0,1),(1,1)> = 1.0; prediction = <(1,0),(1,1)> = 1
    assert loss == pytest.approx(0.0)
    loss, _ = krope_pair_loss(enc, enc, (b1, b2), 0.0)
    assert loss == pytest.approx(0.25)


def test_krope_loss_expected_target_is_operator():
    """With averaged successors, per-pair targets equal the kernel operator entries."""
    rng = np.random.default_rng(1)
    n_sa = 6
    enc = LinearEncoder(rng.normal(size=(3, n_sa + 1)) * 0.3)
    rows = synthetic_dataset([(s, 0, r, (s + 1) % n_sa) for s, r in enumerate(rng.uniform(-1, 1, n_sa))],
                             n_states=n_sa, n_actions=1)
    table = TransitionTable.build(rows, Policy.uniform(n_sa, 1))
    phi_all = enc(np.eye(n_sa))
    next_dist = np.eye(n_sa)[(np.arange(n_sa) + 1) % n_sa]
    targets = empirical_krope_targets(phi_all @ phi_all.T, rows.rewards, next_dist, 0.9)
    i, j = np.triu_indices(n_sa)
    loss, _ = krope_pair_loss(enc, enc, (table.take(i), table.take(j)), 0.9)
    pred = np.einsum("ij,ij->i", enc.features(table.inputs[i]), enc.features(table.inputs[j]))
    assert loss == pytest.approx(np.mean((targets[i, j] - pred) ** 2))


def test_krope_loss_validation():
    b = random_batch(np.random.default_rng(0), 3, 2)
    short = random_batch(np.random.default_rng(0), 2, 2)
    enc = LinearEncoder(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        krope_pair_loss(enc, enc, (b, short), 0.9)
    with pytest.raises(DegenerateRangeError):
        reward_similarity(np.zeros(1), np.zeros(1), (1.0, 1.0))
    empty = Batch(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        fqe_loss(enc, FqeHead(np.ones(2)), enc, FqeHead(np.ones(2)), empty, 0.9)


def test_fqe_loss_hand_computed():
    enc = LinearEncoder(np.array([[1.0, 0.0]]))
    head = FqeHead(np.array([2.0]))
    b = Batch(augment([[1.0]]), np.array([0.5]), augment([[3.0]]))
    loss, _, _ = fqe_loss(enc, head, enc, head, b, 0.5)
    # target 0.5 + 0.5 * 6 = 3.5; prediction 2
    assert loss == pytest.approx(2.25)


def test_coadaptation_penalties():
    enc = LinearEncoder(np.array([[1.0, 0.0]]))
    b = Batch(augment([[1.0], [2.0]]), np.zeros(2), augment([[-1.0], [1.0]]))
    assert dr3_penalty(enc, b)[0] == pytest.approx(1.5)
    # co-adaptation values -1 and 2; hinge at floor 1 is active on the first only
    assert beer_penalty(enc, b, 1.0)[0] == pytest.approx(2.0)
    assert beer_penalty(enc, b, -5.0)[0] == 0.0


def test_bcrl_terms_at_perfect_fit():
    enc = LinearEncoder(np.array([[1.0, 0.0]]))
    heads = BcrlHeads(np.array([[0.5]]), np.array([1.0]))
    b = Batch(augment([[1.0], [2.0]]), np.array([1.0, 2.0]), augment([[1.0], [2.0]]))
    terms, *_ = bcrl_losses(enc, heads, enc, b, 0.5, 0.0)
    assert terms.reward == pytest.approx(0.0)
    assert terms.self_prediction == pytest.approx(0.0)
    assert terms.logdet == pytest.approx(np.log(2.5 + 1e-6))


def test_transition_table_expected_successor():
    mdp, features = counterexample_mrp()
    inputs = np.vstack([features, np.zeros((1, 3))])
    ds = synthetic_dataset([(2, 0, 0.0, 2), (2, 0, 0.0, 4), (3, 0, 0.0, 2)], mdp)
    table = TransitionTable.build(ds, Policy.uniform(5, 1), inputs, mdp.terminal_mask)
    np.testing.assert_allclose(table.next_inputs, [[0, 0, 2, 1], [0, 0, 0, 0], [0, 0, 2, 1]])
    np.testing.assert_allclose(table.inputs[2], [0, 0, 1, 1])


def test_transition_table_sampled_actions():
    ds = synthetic_dataset([(0, 0, 0.0, 1)] * 2000, n_states=2, n_actions=2)
    pi = Policy(np.array([[0.5, 0.5], [0.25, 0.75]]))
    table = TransitionTable.build(ds, pi)
    mean = table.next_inputs[0]
    np.testing.assert_allclose(mean, [0, 0, 0.25, 0.75, 1])
    sampled = table.take(np.arange(2000), np.random.default_rng(0)).next_inputs
    assert np.max(np.abs(sampled.mean(axis=0) - mean)) < 0.05
    assert set(np.unique(sampled[:, 3])) == {0.0, 1.0}


def test_sgd_step():
    p = np.array([1.0, -2.0])
    Sgd(lr=0.1).step([p], [np.array([1.0, 1.0])])
    np.testing.assert_allclose(p, [0.9, -2.1])


def test_adamw_first_step():
    # first bias-corrected step moves every coordinate by lr * sign(g), after decay
    p = np.array([1.0, -2.0])
    AdamW(lr=0.1, weight_decay=0.5).step([p], [np.array([3.0, -0.2])])
    np.testing.assert_allclose(p, [1.0 * 0.95 - 0.1, -2.0 * 0.95 + 0.1], atol=1e-7)


def test_make_optimizer():
    assert isinstance(make_optimizer("sgd", 0.1, 0.0), Sgd)
    assert isinstance(make_optimizer("adamw", 0.1, 0.0), AdamW)
    with pytest.raises(ParameterError):
        make_optimizer("rmsprop", 0.1, 0.0)
