"""Experiment harness: Garnet sweeps, the pairing divergence study, OPE traces, diagnosis.

Trial ``i`` of a run uses seed ``config.seed + i`` for the MDP, its dataset
and training, so a single trial can be re-run in isolation. Trials may run
in a process pool; results are collected in submission order, which keeps
every output file byte-identical across runs and job counts.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from kropelab.diagnostics import DiagnosticsReport, diagnose, normalized_msve
from kropelab.encoders import LinearEncoder
from kropelab.errors import ParameterError
from kropelab.io import load_dataset, load_mdp, read_matrix_csv, write_rows_csv
from kropelab.kernels import factorize_kernel, krope_kernel
from kropelab.losses import TransitionTable
from kropelab.lspe import DIVERGED as LSPE_DIVERGED, LspeProblem, lspe_solve
from kropelab.mdp import (
    COUNTEREXAMPLE_OFF_STATES,
    Policy,
    TabularMDP,
    counterexample_datasets,
    counterexample_mrp,
    exact_q,
    generate_garnet,
    garnet_policies,
    sample_dataset,
)
from kropelab.training import DIVERGED, OK, TrainingConfig, train_auxiliary, train_bcrl, train_krope

KINDS = ("garnet_sweep", "counterexample", "ope_trace", "diagnose")
ALGORITHMS = ("krope", "fqe", "fqe+krope", "fqe+dr3", "fqe+beer", "bcrl", "bcrl-exp", "exact_krope")
BCRL_EXP_LOGDET = 1e-2
Z95 = 1.96


@dataclass(frozen=True)
class GarnetParams:
    n_states: int = 8
    n_actions: int = 5
    branching: int = 3
    gamma: float = 0.99
    temperature: float = 0.25
    dataset_size: int = 2000


def counterexample_training() -> TrainingConfig:
    """Training setup of the pairing study (see the README for how it was chosen)."""
    return TrainingConfig(latent_dim=3, optimizer="sgd", learning_rate=0.04, weight_decay=0.0,
                          batch_size=1400, epochs=500, aux_weight=0.8)


@dataclass(frozen=True)
class CounterexampleParams:
    p_loop: float = 0.5
    rewards: tuple | None = None
    n_on_policy: int = 2000
    n_off_policy: int = 5000
    training: TrainingConfig = field(default_factory=counterexample_training)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    algorithms: tuple | None = None
    dims: tuple = (10, 20, 30)
    trials: int = 30
    seed: int = 0
    jobs: int = 1
    garnet: GarnetParams = field(default_factory=GarnetParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    counterexample: CounterexampleParams = field(default_factory=CounterexampleParams)
    eval_every: int = 10
    exact_expectations: bool = False
    learning_rates: tuple = ()
    aux_weights: tuple = ()
    encoder_path: str | None = None
    mdp_path: str | None = None
    dataset_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.algorithms is None:
            default = COUNTEREXAMPLE_RUNS if self.kind == "counterexample" else ("krope", "fqe", "exact_krope")
            object.__setattr__(self, "algorithms", default)
        if self.trials < 1:
            raise ParameterError("trials must be at least 1")
        if not self.dims:
            raise ParameterError("dims must be non-empty")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ParameterError(f"unknown algorithms {sorted(unknown)}")
        if self.jobs < 1 or self.eval_every < 1:
            raise ParameterError("jobs and eval_every must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls._from_dict(dict(data))
        except TypeError as exc:
            raise ParameterError(str(exc)) from exc

    @classmethod
    def _from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown config keys {sorted(extra)}")
        if "garnet" in data:
            data["garnet"] = GarnetParams(**data["garnet"])
        if "training" in data:
            data["training"] = TrainingConfig(**data["training"])
        if "counterexample" in data:
            ce = dict(data["counterexample"])
            if "training" in ce:
                ce["training"] = counterexample_training().replace(**ce["training"])
            if ce.get("rewards") is not None:
                ce["rewards"] = tuple(ce["rewards"])
            data["counterexample"] = CounterexampleParams(**ce)
        for key in ("algorithms", "dims", "learning_rates", "aux_weights"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Short digest of every setting that can change results (``jobs`` cannot)."""
        data = self.to_dict()
        del data["jobs"]
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def trial_seed(self, trial: int) -> int:
        return self.seed + trial


@dataclass
class TrialResult:
    algorithm: str
    dim: int
    trial: int
    seed: int
    status: str
    metrics: dict
    trace: list = field(default_factory=list)


def _map(fn: Callable, tasks: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*tasks)))


# ----------------------------------------------------------------- Garnet setup

@dataclass(frozen=True)
class GarnetProblem:
    mdp: TabularMDP
    behavior: Policy
    target: Policy
    dataset: object
    q: np.ndarray
    q_random: np.ndarray

    @classmethod
    def build(cls, params: GarnetParams, seed: int) -> "GarnetProblem":
        mdp = generate_garnet(params.n_states, params.n_actions, params.branching, seed, params.gamma)
        behavior, target = garnet_policies(mdp, params.temperature)
        dataset = sample_dataset(mdp, behavior, params.dataset_size, seed)
        return cls(mdp, behavior, target, dataset, exact_q(mdp, target),
                   exact_q(mdp, Policy.uniform(mdp.n_states, mdp.n_actions)))


def train_encoder(algorithm: str, table: TransitionTable, config: TrainingConfig, gamma: float,
                  record_weights: bool = False):
    """Dispatch one learned algorithm; returns a :class:`TrainingResult`."""
    if algorithm == "krope":
        return train_krope(table, config, gamma, record_weights=record_weights)
    if algorithm == "fqe":
        return train_auxiliary(table, config, gamma, "none", record_weights=record_weights)
    if algorithm.startswith("fqe+"):
        return train_auxiliary(table, config, gamma, algorithm[4:], record_weights=record_weights)
    if algorithm == "bcrl":
        return train_bcrl(table, config.replace(logdet_coeff=0.0), gamma, record_weights)
    if algorithm == "bcrl-exp":
        return train_bcrl(table, config.replace(logdet_coeff=BCRL_EXP_LOGDET), gamma, record_weights)
    raise ParameterError(f"{algorithm!r} is not a trained algorithm")


def exact_krope_features(mdp: TabularMDP, pi_e: Policy, dim: int) -> np.ndarray:
    """Leading-``dim`` factorization of the exact KROPE kernel."""
    return factorize_kernel(krope_kernel(mdp, pi_e), max_rank=dim)


def lspe_msve(features: np.ndarray, problem: GarnetProblem, exact: bool) -> tuple[str, float]:
    """Fit LSPE on frozen features; normalized MSVE under the dataset distribution."""
    if exact:
        lp = LspeProblem.exact(features, problem.mdp, problem.target, problem.dataset.mu)
    else:
        lp = LspeProblem.from_features(features, problem.dataset, problem.target, problem.mdp.gamma)
    result = lspe_solve(lp, max_iters=20_000, record_trace=False)
    if result.status == LSPE_DIVERGED:
        return result.status, math.nan
    q_hat = features @ result.theta
    w = problem.dataset.mu
    return result.status, normalized_msve(q_hat, problem.q, problem.q_random, w)


def report_for(features: np.ndarray, problem: GarnetProblem, exact_mode: bool) -> DiagnosticsReport:
    """Diagnostics of an all-state-action feature matrix.

    Exact mode evaluates every state-action with exact successor
    expectations; otherwise evaluation rows are the dataset's.
    """
    mdp, pi_e = problem.mdp, problem.target
    if exact_mode:
        lp = LspeProblem.exact(features, mdp, pi_e)
    else:
        lp = LspeProblem.from_features(features, problem.dataset, pi_e, mdp.gamma)
    _, err = lspe_msve(features, problem, exact_mode)
    return diagnose(lp.phi, lp.phi_next, lp.rewards, mdp.gamma, features, problem.q, err)


def run_garnet_trial(config: ExperimentConfig, algorithm: str, dim: int, trial: int) -> TrialResult:
    seed = config.trial_seed(trial)
    problem = GarnetProblem.build(config.garnet, seed)
    if algorithm == "exact_krope":
        features = exact_krope_features(problem.mdp, problem.target, dim)
        report = report_for(features, problem, exact_mode=True)
        return TrialResult(algorithm, dim, trial, seed, OK, {**asdict(report), "final_loss": 0.0})
    table = TransitionTable.build(problem.dataset, problem.target)
    result = train_encoder(algorithm, table, config.training.replace(latent_dim=dim, seed=seed),
                           problem.mdp.gamma)
    if result.diverged:
        return TrialResult(algorithm, dim, trial, seed, DIVERGED, {}, result.trace)
    features = result.encoder(np.eye(problem.mdp.n_sa))
    report = report_for(features, problem, exact_mode=False)
    return TrialResult(algorithm, dim, trial, seed, OK,
                       {**asdict(report), "final_loss": result.trace[-1].loss}, result.trace)


REPORT_FIELDS = DiagnosticsReport.header() + ["final_loss"]
SWEEP_HEADER = ["config_hash", "algorithm", "dim", "trial", "seed", "status"] + REPORT_FIELDS


def run_garnet_sweep(config: ExperimentConfig) -> list[TrialResult]:
    tasks = [(config, alg, d, t) for alg in config.algorithms for d in config.dims
             for t in range(config.trials)]
    return _map(run_garnet_trial, tasks, config.jobs)


def sweep_rows(config: ExperimentConfig, results: Iterable[TrialResult]) -> list[list]:
    h = config.config_hash()
    return [[h, r.algorithm, r.dim, r.trial, r.seed, r.status]
            + [r.metrics.get(k, math.nan) for k in REPORT_FIELDS] for r in results]


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True)
class Interval:
    mean: float
    half_width: float
    n: int
    single: bool


def mean_ci(values: Sequence[float]) -> Interval:
    """Mean and 95% normal-approximation half-width ``1.96 * sd / sqrt(n)``."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return Interval(math.nan, math.nan, 0, False)
    if x.size == 1:
        return Interval(float(x[0]), 0.0, 1, True)
    return Interval(float(x.mean()), float(Z95 * x.std(ddof=1) / math.sqrt(x.size)), int(x.size), False)


SUMMARY_METRICS = ("spectral_radius", "condition_number", "coadaptation", "realizability_error",
                   "ortho_value_correlation", "msve_normalized", "bc_proxy_loss")


def aggregate(results: Sequence[TrialResult], metrics: Sequence[str] = SUMMARY_METRICS) -> list[dict]:
    """Per ``(algorithm, dim)`` cell: divergence and stability fractions plus metric means and CIs.

    Diverged trials count towards ``diverged_fraction`` (and as unstable)
    but are left out of every metric mean.
    """
    cells: dict[tuple, list[TrialResult]] = {}
    for r in results:
        cells.setdefault((r.algorithm, r.dim), []).append(r)
    rows = []
    for (alg, dim), group in cells.items():
        ok = [r for r in group if r.status == OK]
        row = {"algorithm": alg, "dim": dim, "trials": len(group),
               "diverged_fraction": 1.0 - len(ok) / len(group),
               "stable_fraction": sum(bool(r.metrics.get("is_stable")) for r in ok) / len(group)}
        for m in metrics:
            ci = mean_ci([r.metrics[m] for r in ok])
            row[f"{m}_mean"] = ci.mean
            row[f"{m}_ci95"] = ci.half_width
        row["single_trial"] = len(ok) == 1
        row["ci_method"] = "normal95"
        rows.append(row)
    return rows


# ------------------------------------------------------------ counterexample

COUNTEREXAMPLE_RUNS = ("fqe", "krope", "fqe+krope")
TRACE_HEADER = ["config_hash", "run", "pairing", "trial", "epoch", "loss", "aux_loss", "param_norm", "status"]


def run_counterexample_trial(config: ExperimentConfig, trial: int) -> list[tuple[str, str, object]]:
    """All runs of the pairing study for one seed: ``(run, pairing, TrainingResult)`` triples."""
    params = config.counterexample
    seed = config.trial_seed(trial)
    mdp, features = counterexample_mrp(params.p_loop, params.rewards)
    inputs = np.vstack([features, np.zeros((1, features.shape[1]))])
    pi = Policy.uniform(mdp.n_states, 1)
    d1, variants = counterexample_datasets(mdp, seed, params.n_on_policy, params.n_off_policy)
    t1 = TransitionTable.build(d1, pi, inputs, mdp.terminal_mask)
    cfg = params.training.replace(seed=seed)
    bounds = (mdp.r_min, mdp.r_max)
    out = []
    if "fqe" in config.algorithms:
        out.append(("fqe", "D1", train_auxiliary(t1, cfg.replace(aux_weight=0.0), mdp.gamma, "none")))
    for name in COUNTEREXAMPLE_OFF_STATES:
        t2 = TransitionTable.build(variants[name], pi, inputs, mdp.terminal_mask)
        if "krope" in config.algorithms:
            out.append(("krope", name, train_krope(t1, cfg, mdp.gamma, bounds, paired=t2)))
        if "fqe+krope" in config.algorithms:
            out.append(("fqe+krope", name, train_auxiliary(t1, cfg, mdp.gamma, "krope", bounds, paired=t2)))
    return out


def run_counterexample(config: ExperimentConfig) -> list[tuple[int, str, str, object]]:
    per_trial = _map(run_counterexample_trial, [(config, t) for t in range(config.trials)], config.jobs)
    return [(t, run, pairing, res) for t, runs in enumerate(per_trial) for run, pairing, res in runs]


def counterexample_summary(results) -> list[dict]:
    """Divergence fraction and majority outcome per ``(run, pairing)``."""
    cells: dict[tuple, list[bool]] = {}
    for _, run, pairing, res in results:
        cells.setdefault((run, pairing), []).append(res.diverged)
    rows = []
    for (run, pairing), flags in cells.items():
        frac = sum(flags) / len(flags)
        rows.append({"run": run, "pairing": pairing, "trials": len(flags), "diverged_fraction": frac,
                     "majority_status": DIVERGED if frac > 0.5 else OK})
    return rows


# ----------------------------------------------------------------- OPE traces

OPE_HEADER = ["config_hash", "algorithm", "dim", "learning_rate", "aux_weight", "trial", "epoch",
              "lspe_status", "msve_normalized"]


def run_ope_trial(config: ExperimentConfig, algorithm: str, dim: int, lr: float, alpha: float,
                  trial: int) -> list[tuple[int, str, float]]:
    """``(epoch, lspe_status, normalized MSVE)`` every ``eval_every`` epochs."""
    seed = config.trial_seed(trial)
    problem = GarnetProblem.build(config.garnet, seed)
    epochs = config.training.epochs
    checkpoints = list(range(0, epochs + 1, config.eval_every))
    if algorithm == "exact_krope":
        features = exact_krope_features(problem.mdp, problem.target, dim)
        snapshots = {e: features for e in checkpoints}
    else:
        table = TransitionTable.build(problem.dataset, problem.target)
        cfg = config.training.replace(latent_dim=dim, seed=seed, learning_rate=lr, aux_weight=alpha)
        result = train_encoder(algorithm, table, cfg, problem.mdp.gamma, record_weights=True)
        eye = np.eye(problem.mdp.n_sa)
        use_bias = cfg.use_bias
        snapshots = {e: LinearEncoder(result.weight_history[e], use_bias)(eye)
                     for e in checkpoints if e < len(result.weight_history)}
    rows = []
    for epoch in checkpoints:
        if epoch not in snapshots:
            rows.append((epoch, DIVERGED, math.nan))
            continue
        feats = snapshots[epoch]
        if not np.all(np.isfinite(feats)):
            rows.append((epoch, DIVERGED, math.nan))
            continue
        status, err = lspe_msve(feats, problem, config.exact_expectations)
        rows.append((epoch, status, err))
    return rows


def run_ope_trace(config: ExperimentConfig) -> list[tuple]:
    lrs = config.learning_rates or (config.training.learning_rate,)
    alphas = config.aux_weights or (config.training.aux_weight,)
    tasks = [(config, alg, d, lr, a, t) for alg in config.algorithms for d in config.dims
             for lr in lrs for a in alphas for t in range(config.trials)]
    traces = _map(run_ope_trial, tasks, config.jobs)
    return [(task[1:], rows) for task, rows in zip(tasks, traces)]


def sensitivity_rows(traces) -> list[dict]:
    """Final-checkpoint error per hyperparameter cell with its empirical CDF position."""
    finals: dict[tuple, list[float]] = {}
    for (alg, dim, lr, alpha, _), rows in traces:
        finals.setdefault((alg, dim, lr, alpha), []).append(rows[-1][2])
    cells = [{"algorithm": k[0], "dim": k[1], "learning_rate": k[2], "aux_weight": k[3],
              "final_msve_mean": float(np.nanmean(v)) if np.any(np.isfinite(v)) else math.nan}
             for k, v in finals.items()]
    for cell in cells:
        peers = [c["final_msve_mean"] for c in cells if c["algorithm"] == cell["algorithm"]]
        x = cell["final_msve_mean"]
        cell["error_cdf"] = (sum(p <= x for p in peers if not math.isnan(p)) / len(peers)
                             if not math.isnan(x) else math.nan)
    return cells


# ------------------------------------------------------------------- diagnose

def run_diagnose(config: ExperimentConfig) -> DiagnosticsReport:
    """One report for an encoder weight file and an MDP file (target policy per ``garnet``)."""
    if not (config.encoder_path and config.mdp_path):
        raise ParameterError("diagnose needs encoder_path and mdp_path")
    mdp = load_mdp(config.mdp_path)
    encoder = LinearEncoder(read_matrix_csv(config.encoder_path))
    _, target = garnet_policies(mdp, config.garnet.temperature)
    features = encoder(np.eye(mdp.n_sa))
    q = exact_q(mdp, target)
    if config.dataset_path:
        dataset = load_dataset(config.dataset_path)
        lp = LspeProblem.from_features(features, dataset, target, mdp.gamma)
    else:
        lp = LspeProblem.exact(features, mdp, target)
    return diagnose(lp.phi, lp.phi_next, lp.rewards, mdp.gamma, features, q)


# -------------------------------------------------------------------- outputs

def write_outputs(config: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Run the configured experiment and write its CSV files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config.config_hash()
    written = []

    def emit(name: str, header: list[str], rows: list[list]) -> None:
        path = out / name
        write_rows_csv(path, header, rows)
        written.append(path)

    def emit_dicts(name: str, dicts: list[dict]) -> None:
        if dicts:
            header = ["config_hash"] + list(dicts[0])
            emit(name, header, [[h] + list(d.values()) for d in dicts])

    if config.kind == "garnet_sweep":
        results = run_garnet_sweep(config)
        emit("garnet_trials.csv", SWEEP_HEADER, sweep_rows(config, results))
        emit_dicts("garnet_summary.csv", aggregate(results))
    elif config.kind == "counterexample":
        results = run_counterexample(config)
        rows = [[h, run, pairing, t, r.epoch, r.loss, r.aux_loss, r.param_norm, r.status]
                for t, run, pairing, res in results for r in res.trace]
        emit("counterexample_traces.csv", TRACE_HEADER, rows)
        emit_dicts("counterexample_summary.csv", counterexample_summary(results))
    elif config.kind == "ope_trace":
        traces = run_ope_trace(config)
        rows = [[h, *key[:4], key[4], epoch, status, err]
                for key, trace in traces for epoch, status, err in trace]
        emit("ope_trace.csv", OPE_HEADER, rows)
        emit_dicts("ope_sensitivity.csv", sensitivity_rows(traces))
    else:
        report = run_diagnose(config)
        emit("diagnostics.csv", ["config_hash"] + DiagnosticsReport.header(), [[h] + report.row()])
    return written
