"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (the lines are
collected and shown in the terminal summary) or ``python3 tests/test_acceptance.py``.
"""

import functools
import json
import math
import sys
import time

import numpy as np
import pytest

from kropelab.cli import main as cli_main
from kropelab.diagnostics import bc_proxy_loss, ortho_value_correlation, stability_spectral_radius
from kropelab.experiments import (
    ALGORITHMS,
    ExperimentConfig,
    counterexample_summary,
    run_counterexample,
    run_garnet_trial,
)
from kropelab.kernels import (
    apply_krope_operator,
    factorize_kernel,
    k1_matrix,
    krope_fixed_point,
    krope_kernel,
    value_gap_bound,
)
from kropelab.lspe import CONVERGED, LspeProblem, lspe_solve
from kropelab.mdp import (
    Policy,
    TabularMDP,
    exact_q,
    garnet_policies,
    generate_garnet,
    pi_transition_matrix,
)

from gradcheck import gradient_errors

GAMMA = 0.99
RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def garnet(seed):
    mdp = generate_garnet(8, 5, 3, seed=seed, gamma=GAMMA)
    return mdp, garnet_policies(mdp)[1]


def test_criterion_01_exact_krope_radius():
    start = time.perf_counter()
    radii = []
    for seed in range(30):
        mdp, pi = garnet(seed)
        phi = factorize_kernel(krope_kernel(mdp, pi, tol=1e-10))
        problem = LspeProblem.exact(phi, mdp, pi)
        radii.append(stability_spectral_radius(problem.phi, problem.phi_next, mdp.gamma))
    elapsed = time.perf_counter() - start
    bound = math.sqrt(GAMMA) + 1e-6
    hits = sum(r <= bound for r in radii)
    report(1, hits == 30 and elapsed < 60,
           f"{hits}/30 radii <= sqrt(0.99)+1e-6 (max {max(radii):.6f}), {elapsed:.1f}s")


def test_criterion_02_contraction():
    rng = np.random.default_rng(2)
    worst = -math.inf
    for _ in range(200):
        n = int(rng.integers(2, 12))
        p = rng.random((n, n)) * (rng.random((n, n)) < 0.5) + 1e-3
        p /= p.sum(axis=1, keepdims=True)
        k1 = k1_matrix(rng.uniform(-1, 1, n))
        gamma = float(rng.uniform(0, 1))
        a, b = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        ka, kb = a @ a.T, b @ b.T
        lhs = np.max(np.abs(apply_krope_operator(ka, k1, p, gamma) - apply_krope_operator(kb, k1, p, gamma)))
        worst = max(worst, lhs - gamma * np.max(np.abs(ka - kb)))
    report(2, worst <= 1e-12, f"200 PSD pairs, max excess over gamma-contraction {worst:.2e}")


def test_criterion_03_fixed_point_vs_direct_solve():
    errors = []
    for seed in range(10):
        mdp, pi = garnet(seed)
        p = pi_transition_matrix(mdp, pi)
        k1 = k1_matrix(mdp.rewards)
        n = mdp.n_sa
        direct = np.linalg.solve(np.eye(n * n) - mdp.gamma * np.kron(p, p), k1.reshape(-1)).reshape(n, n)
        errors.append(np.max(np.abs(krope_fixed_point(k1, p, mdp.gamma) - direct)))
    report(3, max(errors) <= 1e-8, f"10 Garnets, max sup-norm gap {max(errors):.2e}")


def deterministic_mdp(seed):
    rng = np.random.default_rng(seed)
    n_s, n_a = 8, 5
    p = np.zeros((n_s * n_a, n_s))
    p[np.arange(n_s * n_a), rng.integers(0, n_s, n_s * n_a)] = 1.0
    mdp = TabularMDP(n_s, n_a, rng.uniform(-1, 1, n_s * n_a), p, GAMMA, np.full(n_s, 1 / n_s))
    return mdp, Policy.deterministic(rng.integers(0, n_a, n_s), n_a)


def test_criterion_04_value_bound():
    # the bound is tight on deterministic MDPs, so the kernel is solved to 1e-13
    # (stopping at 1e-10 leaves up to ~1e-8 of error in each distance)
    det_slack, det_const, sto_slack = math.inf, 0.0, math.inf
    for seed in range(10):
        mdp, pi = deterministic_mdp(seed)
        b = value_gap_bound(pi_transition_matrix(mdp, pi), mdp.rewards, mdp.gamma,
                           krope_kernel(mdp, pi, tol=1e-13), exact_q(mdp, pi))
        det_const = max(det_const, float(np.max(b.constant)))
        det_slack = min(det_slack, float(np.min(b.distance - b.value_gap)))
    for seed in range(10):
        mdp, pi = garnet(seed)
        b = value_gap_bound(pi_transition_matrix(mdp, pi), mdp.rewards, mdp.gamma,
                           krope_kernel(mdp, pi), exact_q(mdp, pi), truncation_n=2000)
        sto_slack = min(sto_slack, float(np.min(b.slack)))
    ok = det_const == 0.0 and det_slack >= -1e-8 and sto_slack >= 0.0
    report(4, ok, f"deterministic min slack {det_slack:.3g} (C={det_const}), "
                  f"stochastic min slack {sto_slack:.3g}")


def test_criterion_05_lspe_stability_equivalence():
    disagreements, used = 0, 0
    seed = 1000
    while used < 50:
        rng = np.random.default_rng(seed)
        seed += 1
        m, d = int(rng.integers(10, 30)), int(rng.integers(2, 6))
        phi = rng.normal(size=(m, d))
        rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
        nxt = phi @ (rng.uniform(0.3, 1.8) * rot) + 0.1 * rng.normal(size=(m, d))
        problem = LspeProblem(phi, nxt, rng.normal(size=m), 0.9)
        radius = stability_spectral_radius(phi, nxt, 0.9)
        if abs(radius - 1.0) <= 1e-6:
            continue
        used += 1
        for _ in range(10):
            res = lspe_solve(problem, theta0=rng.normal(size=d) * 10, max_iters=1_000_000,
                             record_trace=False)
            disagreements += (res.status == CONVERGED) != (radius < 1.0)
    report(5, disagreements == 0, f"50 problems x 10 starts, {disagreements} disagreements")


def duplicated_mdp(seed):
    """Garnet-like MDP whose first three state-actions are copied onto the last three."""
    rng = np.random.default_rng(seed)
    n_s, n_a = 6, 3
    n = n_s * n_a
    p = np.zeros((n, n_s))
    for i in range(n):
        p[i, rng.choice(n_s, 3, replace=False)] = rng.dirichlet(np.ones(3))
    r = rng.uniform(-0.95, 0.95, n)
    p[-3:], r[-3:] = p[:3], r[:3]
    return TabularMDP(n_s, n_a, r, p, 0.9, np.full(n_s, 1 / n_s)), Policy.uniform(n_s, n_a)


def test_criterion_06_bellman_completeness():
    exact_worst, lossy_best = 0.0, math.inf
    for seed in range(10):
        mdp, pi = duplicated_mdp(seed)
        phi = factorize_kernel(krope_kernel(mdp, pi))
        problem = LspeProblem.exact(phi, mdp, pi)
        exact_worst = max(exact_worst, bc_proxy_loss(problem.phi, problem.phi_next, problem.rewards, mdp.gamma))
        lossy = phi @ np.random.default_rng(seed).normal(size=(phi.shape[1], 1))
        lp = LspeProblem.exact(lossy, mdp, pi)
        lossy_best = min(lossy_best, bc_proxy_loss(lp.phi, lp.phi_next, lp.rewards, mdp.gamma))
    report(6, exact_worst <= 1e-6 and lossy_best > 1e-4,
           f"exact max {exact_worst:.2e} (<=1e-6), 1-d projection min {lossy_best:.2e} (>1e-4)")


SWEEP = ExperimentConfig.from_dict({"kind": "garnet_sweep", "dims": [10, 20, 30], "trials": 30})


@functools.lru_cache(maxsize=None)
def learned(algorithm, dim, trial):
    return run_garnet_trial(SWEEP, algorithm, dim, trial)


def test_criterion_07_learned_krope_stability():
    fractions = {}
    for dim in (10, 20, 30):
        runs = [learned("krope", dim, t) for t in range(30)]
        fractions[dim] = sum(r.status == "ok" and r.metrics["is_stable"] for r in runs) / 30
    ok = all(f >= 0.9 for f in fractions.values())
    report(7, ok, "stable fraction " + ", ".join(f"d={d}: {f:.2f}" for d, f in fractions.items()))


def test_criterion_08_full_rank_realizability():
    cfg = ExperimentConfig.from_dict({"kind": "garnet_sweep", "dims": [40, 50], "trials": 2})
    worst = {}
    for alg in ALGORITHMS:
        errs = [run_garnet_trial(cfg, alg, d, t) for d in (40, 50) for t in range(2)]
        worst[alg] = max(r.metrics.get("realizability_error", math.inf) for r in errs)
    bad = {a: e for a, e in worst.items() if not e <= 1e-6}
    report(8, not bad, f"max realizability error {max(worst.values()):.2e} over {len(worst)} algorithms"
                       + (f"; failing {bad}" if bad else ""))


def test_criterion_09_orthogonality_correlation():
    exact_wins = 0
    for seed in range(30):
        mdp, pi = garnet(seed)
        q = exact_q(mdp, pi)
        phi = factorize_kernel(krope_kernel(mdp, pi))
        rand = np.random.default_rng(seed).normal(size=phi.shape)
        exact_wins += ortho_value_correlation(phi, q).value > ortho_value_correlation(rand, q).value
    learned_wins = 0
    for t in range(30):
        k, f = learned("krope", 20, t), run_garnet_trial(SWEEP, "fqe", 20, t)
        learned_wins += (k.status == "ok" and f.status == "ok"
                         and k.metrics["ortho_value_correlation"] > f.metrics["ortho_value_correlation"])
    report(9, exact_wins >= 27 and learned_wins > 15,
           f"exact beats random on {exact_wins}/30, trained KROPE beats FQE on {learned_wins}/30")


def test_criterion_10_counterexample_pairings():
    cfg = ExperimentConfig.from_dict({"kind": "counterexample", "trials": 20})
    summary = {(r["run"], r["pairing"]): r["majority_status"]
               for r in counterexample_summary(run_counterexample(cfg))}
    want = {"w1": "ok", "w2": "ok", "w3": "diverged", "2w3": "diverged"}
    outcomes = {"fqe on D1 diverges": summary[("fqe", "D1")] == "diverged"}
    for pairing, status in want.items():
        outcomes[f"krope {pairing} {status}"] = summary[("krope", pairing)] == status
    outcomes["fqe+krope same pattern"] = all(summary[("fqe+krope", p)] == s for p, s in want.items())
    matched = sum(outcomes.values())
    missed = [k for k, v in outcomes.items() if not v]
    observed = ", ".join(f"{run}/{p}={s}" for (run, p), s in summary.items())
    report(10, matched == 6, f"{matched}/6 outcomes matched; missed {missed}; observed {observed}")


def test_criterion_11_gradients():
    worst: dict[str, float] = {}
    for seed in range(20):
        for name, err in gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    report(11, max(worst.values()) <= 1e-4,
           f"20 batches per objective, max relative error {max(worst.values()):.2e}")


def test_criterion_12_cli_determinism(tmp_path):
    configs = {
        "garnet-sweep": {"dims": [4], "trials": 2, "training": {"epochs": 5},
                         "algorithms": list(ALGORITHMS)},
        "counterexample": {"trials": 2, "counterexample": {"training": {"epochs": 20}}},
        "ope-trace": {"dims": [4], "trials": 2, "training": {"epochs": 20},
                      "algorithms": ["krope", "fqe+dr3", "exact_krope"], "learning_rates": [1e-3, 3e-3]},
    }
    from kropelab.encoders import LinearEncoder
    from kropelab.io import save_mdp, write_matrix_csv

    save_mdp(tmp_path / "mdp.json", generate_garnet(8, 5, seed=0))
    write_matrix_csv(tmp_path / "enc.csv", LinearEncoder.init(40, 6, np.random.default_rng(0)).weights)
    configs["diagnose"] = {"encoder_path": str(tmp_path / "enc.csv"), "mdp_path": str(tmp_path / "mdp.json")}
    mismatched = []
    for command, cfg in configs.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(cfg))
        for run in ("a", "b"):
            assert cli_main([command, "--config", str(path), "--out", str(tmp_path / run / command)]) == 0
        for file in sorted((tmp_path / "a" / command).iterdir()):
            if file.read_bytes() != (tmp_path / "b" / command / file.name).read_bytes():
                mismatched.append(f"{command}/{file.name}")
    report(12, not mismatched, f"4 subcommands run twice, mismatched files: {mismatched or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
