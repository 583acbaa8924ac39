"""Latin-hypercube demand sampling, DC-OPF labelling and the JSONL dataset file."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .dcopf import solve_dcopf
from .errors import AllInfeasible, EmptyBox, Infeasible
from .grid import compute_ptdf

log = logging.getLogger(__name__)

LOAD_LOW, LOAD_HIGH = 0.6, 1.0
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
SPLITS = ("train", "val", "test")


def lhs_sample(n, lower, upper, seed):
    """``n`` points in the box with exactly one point per equal-width stratum in
    every dimension."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if n < 1:
        raise ValueError("n must be >= 1")
    if lower.shape != upper.shape:
        raise ValueError("lower and upper must have the same shape")
    if np.any(lower > upper):
        raise EmptyBox(f"lower > upper in dimension(s) {np.flatnonzero(lower > upper).tolist()}")
    unit = qmc.LatinHypercube(d=lower.size, seed=np.random.default_rng(seed)).random(n)
    return lower + unit * (upper - lower)


def split_counts(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


@dataclass
class Dataset:
    pd: np.ndarray
    pg: np.ndarray
    split: list
    lower: np.ndarray
    upper: np.ndarray
    seed: int
    network_hash: str = ""
    dropped: list = field(default_factory=list)

    def __len__(self):
        return len(self.split)

    def indices(self, name):
        return np.array([i for i, s in enumerate(self.split) if s == name], dtype=int)

    def part(self, name):
        idx = self.indices(name)
        return self.pd[idx], self.pg[idx]

    @property
    def box(self):
        return self.lower, self.upper


def generate_dataset(network, n, seed, low=LOAD_LOW, high=LOAD_HIGH):
    lower, upper = network.demand_box(low, high)
    demands = lhs_sample(n, lower, upper, seed)
    ptdf = compute_ptdf(network)
    keep, labels, dropped = [], [], []
    for i, pd in enumerate(demands):
        try:
            labels.append(solve_dcopf(network, pd, ptdf).pg)
            keep.append(i)
        except Infeasible as exc:
            log.warning("sample %d dropped: %s", i, exc)
            dropped.append(i)
    if not keep:
        raise AllInfeasible(f"all {n} sampled demands are infeasible for {network.name}")
    pd = demands[keep]
    pg = np.array(labels)
    order = np.random.default_rng(seed).permutation(len(keep))
    n_train, n_val, _ = split_counts(len(keep))
    split = [""] * len(keep)
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return Dataset(pd, pg, split, lower, upper, seed, network.digest(), dropped)


def save_dataset(dataset, path):
    header = {"header": {"lower": dataset.lower.tolist(), "upper": dataset.upper.tolist(),
                         "seed": dataset.seed, "network_hash": dataset.network_hash,
                         "n": len(dataset), "dropped": list(dataset.dropped)}}
    lines = [json.dumps(header)]
    for pd, pg, s in zip(dataset.pd, dataset.pg, dataset.split):
        lines.append(json.dumps({"pd": pd.tolist(), "pg": pg.tolist(), "split": s}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])["header"]
    records = [json.loads(line) for line in lines[1:] if line.strip()]
    return Dataset(
        np.array([r["pd"] for r in records], dtype=float),
        np.array([r["pg"] for r in records], dtype=float),
        [r["split"] for r in records],
        np.array(header["lower"], dtype=float),
        np.array(header["upper"], dtype=float),
        header["seed"],
        header.get("network_hash", ""),
        header.get("dropped", []),
    )
