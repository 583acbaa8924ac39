"""Power-network data model and PTDF computation.

Documents carry MW and currency/MW; everything returned by the ``*_pu``
helpers is in per-unit on the network base power.
"""

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DisconnectedGraph, InvalidSlack, SchemaError, SingularSystem


@dataclass(frozen=True)
class Generator:
    bus: int
    cost: float
    pmin: float
    pmax: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    susceptance: float
    limit: float


@dataclass(frozen=True)
class Load:
    bus: int
    nominal: float


@dataclass(frozen=True)
class Network:
    buses: tuple
    slack_bus: int
    generators: tuple
    branches: tuple
    loads: tuple
    base_mva: float = 100.0
    name: str = "network"

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_gen(self):
        return len(self.generators)

    @property
    def n_load(self):
        return len(self.loads)

    @property
    def n_branch(self):
        return len(self.branches)

    def bus_index(self, bus):
        return self.buses.index(bus)

    def gen_matrix(self):
        """Bus-by-generator incidence: ``gen_matrix() @ pg`` is nodal generation."""
        M = np.zeros((self.n_bus, self.n_gen))
        for g, gen in enumerate(self.generators):
            M[self.bus_index(gen.bus), g] = 1.0
        return M

    def load_matrix(self):
        M = np.zeros((self.n_bus, self.n_load))
        for d, load in enumerate(self.loads):
            M[self.bus_index(load.bus), d] = 1.0
        return M

    def gen_bounds_pu(self):
        lo = np.array([g.pmin for g in self.generators]) / self.base_mva
        hi = np.array([g.pmax for g in self.generators]) / self.base_mva
        return lo, hi

    def gen_costs_pu(self):
        # currency/MW -> currency per p.u. of dispatch
        return np.array([g.cost for g in self.generators]) * self.base_mva

    def flow_limits_pu(self):
        return np.array([br.limit for br in self.branches]) / self.base_mva

    def nominal_loads_pu(self):
        return np.array([ld.nominal for ld in self.loads]) / self.base_mva

    def demand_box(self, low=0.6, high=1.0):
        nominal = self.nominal_loads_pu()
        return low * nominal, high * nominal

    def to_document(self):
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "slack_bus": self.slack_bus,
            "buses": list(self.buses),
            "generators": [{"bus": g.bus, "cost": g.cost, "pmin": g.pmin, "pmax": g.pmax}
                           for g in self.generators],
            "branches": [{"from": b.from_bus, "to": b.to_bus, "susceptance": b.susceptance,
                          "limit": b.limit} for b in self.branches],
            "loads": [{"bus": ld.bus, "nominal": ld.nominal} for ld in self.loads],
        }

    def digest(self):
        canon = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _number(value, where, problems):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{where}: expected a number, got {value!r}")
        return None
    value = float(value)
    if not np.isfinite(value):
        problems.append(f"{where}: must be finite")
        return None
    return value


def _records(doc, key, fields, problems):
    items = doc.get(key)
    if not isinstance(items, list):
        problems.append(f"{key}: expected a list")
        return []
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            problems.append(f"{key}[{i}]: expected an object")
            continue
        missing = [f for f in fields if f not in item]
        if missing:
            problems.append(f"{key}[{i}]: missing field(s) {', '.join(missing)}")
            continue
        out.append((i, item))
    return out


def load_network(document):
    """Parse and validate a grid document (JSON text, ``dict`` or path).

    Every schema problem is collected before raising ``SchemaError``.
    """
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text()
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise SchemaError("grid document must be an object")

    problems = []
    base = document.get("base_mva", 100.0)
    base = _number(base, "base_mva", problems)
    if base is not None and base <= 0:
        problems.append("base_mva: must be positive")

    buses = document.get("buses")
    if not isinstance(buses, list) or not buses or not all(isinstance(b, int) and not isinstance(b, bool) for b in buses):
        problems.append("buses: expected a nonempty list of integer ids")
        buses = []
    elif len(set(buses)) != len(buses):
        problems.append("buses: duplicate ids")
    known = set(buses)

    def check_bus(value, where):
        if value not in known:
            problems.append(f"{where}: unknown bus {value!r}")

    generators = []
    for i, g in _records(document, "generators", ("bus", "cost", "pmin", "pmax"), problems):
        check_bus(g["bus"], f"generators[{i}].bus")
        cost = _number(g["cost"], f"generators[{i}].cost", problems)
        lo = _number(g["pmin"], f"generators[{i}].pmin", problems)
        hi = _number(g["pmax"], f"generators[{i}].pmax", problems)
        if lo is not None and hi is not None and lo > hi:
            problems.append(f"generators[{i}] (bus {g['bus']}): pmin {lo} > pmax {hi}")
        generators.append(Generator(g["bus"], cost, lo, hi))
    if not generators:
        problems.append("generators: at least one generator is required")

    branches = []
    for i, br in _records(document, "branches", ("from", "to", "susceptance", "limit"), problems):
        check_bus(br["from"], f"branches[{i}].from")
        check_bus(br["to"], f"branches[{i}].to")
        if br["from"] == br["to"]:
            problems.append(f"branches[{i}]: from and to bus are equal")
        b = _number(br["susceptance"], f"branches[{i}].susceptance", problems)
        lim = _number(br["limit"], f"branches[{i}].limit", problems)
        if b is not None and b <= 0:
            problems.append(f"branches[{i}]: susceptance must be > 0")
        if lim is not None and lim <= 0:
            problems.append(f"branches[{i}]: limit must be > 0")
        branches.append(Branch(br["from"], br["to"], b, lim))

    loads = []
    for i, ld in _records(document, "loads", ("bus", "nominal"), problems):
        check_bus(ld["bus"], f"loads[{i}].bus")
        nominal = _number(ld["nominal"], f"loads[{i}].nominal", problems)
        if nominal is not None and nominal < 0:
            problems.append(f"loads[{i}]: nominal demand must be >= 0")
        loads.append(Load(ld["bus"], nominal))
    if not loads:
        problems.append("loads: at least one load is required")

    if "slack_bus" not in document:
        problems.append("slack_bus: missing")
    if problems:
        raise SchemaError(problems)

    slack = document["slack_bus"]
    if slack not in known:
        raise InvalidSlack(f"slack bus {slack!r} is not one of the buses")

    network = Network(tuple(buses), slack, tuple(generators), tuple(branches), tuple(loads),
                      base, str(document.get("name", "network")))
    isolated = _unreachable(network)
    if isolated:
        raise DisconnectedGraph(f"buses not connected to slack bus {slack}: {isolated}")
    return network


def _unreachable(network):
    adj = {b: [] for b in network.buses}
    for br in network.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = {network.slack_bus}
    queue = deque([network.slack_bus])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return sorted(set(network.buses) - seen)


@dataclass(frozen=True)
class PtdfMatrix:
    matrix: np.ndarray  # branches x buses
    slack_bus: int


def incidence_matrix(network):
    """Branch-by-bus incidence with +1 at ``from`` and -1 at ``to``."""
    C = np.zeros((network.n_branch, network.n_bus))
    for e, br in enumerate(network.branches):
        C[e, network.bus_index(br.from_bus)] = 1.0
        C[e, network.bus_index(br.to_bus)] = -1.0
    return C


def compute_ptdf(network):
    """Flow on each branch (from->to) per unit injection at each bus, withdrawn at the slack."""
    C = incidence_matrix(network)
    b = np.array([br.susceptance for br in network.branches])
    Bf = b[:, None] * C
    Bbus = C.T @ Bf
    keep = [i for i, bus in enumerate(network.buses) if bus != network.slack_bus]
    phi = np.zeros((network.n_branch, network.n_bus))
    if keep:
        reduced = Bbus[np.ix_(keep, keep)]
        try:
            factor = cho_factor(reduced)
        except np.linalg.LinAlgError:
            raise SingularSystem("reduced susceptance matrix is singular") from None
        if np.min(np.abs(np.diag(factor[0]))) < 1e-12 * np.max(np.abs(np.diag(factor[0]))):
            raise SingularSystem("reduced susceptance matrix is numerically singular")
        # reduced B is symmetric, so solving against Bf^T gives the PTDF rows directly
        phi[:, keep] = cho_solve(factor, Bf[:, keep].T).T
    return PtdfMatrix(phi, network.slack_bus)


def bundled_grid(name="case5"):
    path = Path(__file__).with_name("data") / f"{name}.json"
    return load_network(path.read_text())
