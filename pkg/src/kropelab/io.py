"""File formats: headerless matrix CSV, MDP/dataset JSON, and dataset CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from kropelab.mdp import OfflineDataset, TabularMDP

DATASET_HEADER = ["s", "a", "r", "s_next"]


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """Row-major, headerless, 17 significant digits (round-trips doubles exactly)."""
    np.savetxt(path, np.atleast_2d(matrix), fmt="%.17g", delimiter=",")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float, ndmin=2))


def write_json(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def save_mdp(path: str | Path, mdp: TabularMDP) -> None:
    write_json(path, mdp.to_dict())


def load_mdp(path: str | Path) -> TabularMDP:
    return TabularMDP.from_dict(json.loads(Path(path).read_text()))


def save_dataset(path: str | Path, dataset: OfflineDataset) -> None:
    write_json(path, dataset.to_dict())


def load_dataset(path: str | Path) -> OfflineDataset:
    return OfflineDataset.from_dict(json.loads(Path(path).read_text()))


def write_dataset_csv(path: str | Path, dataset: OfflineDataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_HEADER)
        for s, a, r, s_next in dataset.tuples():
            writer.writerow([s, a, repr(r), s_next])


def read_dataset_csv(path: str | Path, n_states: int, n_actions: int) -> OfflineDataset:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(row["s"]), int(row["a"]), float(row["r"]), int(row["s_next"])) for row in reader]
    from kropelab.mdp import synthetic_dataset

    return synthetic_dataset(rows, n_states=n_states, n_actions=n_actions)


def write_rows_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    """CSV with a fixed header; floats are written with ``repr`` for exact round trips."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value
