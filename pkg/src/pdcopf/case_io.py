"""MATPOWER case files, JSON network dumps and N-1 topology enumeration."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .model import UNLIMITED, Branch, Bus, BusKind, Generator, Network, NetworkError

log = logging.getLogger(__name__)

REQUIRED = ("bus", "gen", "branch", "gencost")

# 1-based MATPOWER column numbers
BUS_I, BUS_TYPE, PD, QD, GS, BS, VMAX, VMIN = 1, 2, 3, 4, 5, 6, 12, 13
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, TAP, SHIFT, BR_STATUS = 1, 2, 3, 4, 5, 6, 9, 10, 11
GEN_BUS, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 1, 4, 5, 8, 9, 10
MODEL, NCOST = 1, 4

# PGLib-OPF v23.07 test systems (CC BY 4.0, see data/PGLIB_LICENSE.txt)
BUNDLED = {
    "case30": "pglib_opf_case30_ieee.m",
    "case57": "pglib_opf_case57_ieee.m",
    "pglib_opf_case30_ieee": "pglib_opf_case30_ieee.m",
    "pglib_opf_case57_ieee": "pglib_opf_case57_ieee.m",
}


class CaseFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TopologyVariant:
    network: Network
    removed_branch: int | None


@dataclass
class _Matrix:
    rows: list
    lines: list
    start_line: int


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")


def _scan(text: str):
    base_mva = None
    matrices: dict[str, _Matrix] = {}
    lines = text.splitlines()
    current = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("%", 1)[0].strip()
        if current is None:
            if not line:
                continue
            m = _SCALAR_RE.search(line)
            if m:
                base_mva = float(m.group(1))
                continue
            m = _MATRIX_RE.search(line)
            if not m:
                continue
            current = _Matrix([], [], lineno)
            matrices[m.group(1)] = current
            line = line[m.end():]
        done = "]" in line
        if done:
            line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                current.rows.append([float(t) for t in tokens])
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise CaseFormatError(f"non-numeric token {bad!r}", lineno) from None
            current.lines.append(lineno)
        if done:
            current = None
    if current is not None:
        raise CaseFormatError("unterminated matrix block", current.start_line)
    return base_mva, matrices


def _is_number(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def _col(row, j, default=0.0):
    return row[j - 1] if len(row) >= j else default


def parse_case(text: str, name: str = "network") -> Network:
    """Parse MATPOWER case text into a per-unit :class:`Network`."""
    base_mva, mats = _scan(text)
    if base_mva is None:
        raise CaseFormatError("missing matrix 'baseMVA'")
    for key in REQUIRED:
        if key not in mats:
            raise CaseFormatError(f"missing matrix '{key}'")
    ignored = []

    bus_m = mats["bus"]
    ids = [int(r[BUS_I - 1]) for r in bus_m.rows]
    index = {bid: i for i, bid in enumerate(ids)}
    if len(index) != len(ids):
        raise CaseFormatError("duplicate bus id", bus_m.start_line)
    buses, pd, qd = [], [], []
    for row, lineno in zip(bus_m.rows, bus_m.lines):
        if len(row) < VMIN:
            raise CaseFormatError(f"bus row has {len(row)} columns, need {VMIN}", lineno)
        kind = {3: BusKind.REFERENCE, 2: BusKind.GENERATOR}.get(int(row[BUS_TYPE - 1]), BusKind.LOAD)
        buses.append(
            Bus(
                id=int(row[BUS_I - 1]),
                g_shunt=row[GS - 1] / base_mva,
                b_shunt=row[BS - 1] / base_mva,
                v_min=row[VMIN - 1],
                v_max=row[VMAX - 1],
                bus_kind=kind,
            )
        )
        pd.append(row[PD - 1] / base_mva)
        qd.append(row[QD - 1] / base_mva)

    gen_m, cost_m = mats["gen"], mats["gencost"]
    if len(cost_m.rows) < len(gen_m.rows):
        raise CaseFormatError(
            f"gencost has {len(cost_m.rows)} rows but gen has {len(gen_m.rows)}", cost_m.start_line
        )
    if len(cost_m.rows) > len(gen_m.rows):
        raise CaseFormatError("gencost rows != gen rows (reactive costs are not supported)", cost_m.start_line)
    generators = []
    for grow, glineno, crow, clineno in zip(gen_m.rows, gen_m.lines, cost_m.rows, cost_m.lines):
        bus = int(grow[GEN_BUS - 1])
        if bus not in index:
            raise CaseFormatError(f"dangling generator bus {bus}", glineno)
        if _col(grow, GEN_STATUS, 1.0) <= 0:
            ignored.append(f"offline generator at bus {bus} dropped")
            continue
        c2, c1 = _poly_cost(crow, clineno, ignored)
        generators.append(
            Generator(
                bus=index[bus],
                p_min=_col(grow, PMIN) / base_mva,
                p_max=_col(grow, PMAX) / base_mva,
                q_min=grow[QMIN - 1] / base_mva,
                q_max=grow[QMAX - 1] / base_mva,
                c2=c2 * base_mva**2,
                c1=c1 * base_mva,
            )
        )

    branches = []
    for row, lineno in zip(mats["branch"].rows, mats["branch"].lines):
        f, t = int(row[F_BUS - 1]), int(row[T_BUS - 1])
        for end in (f, t):
            if end not in index:
                raise CaseFormatError(f"dangling branch endpoint {end}", lineno)
        tap, shift = _col(row, TAP), _col(row, SHIFT)
        rate = _col(row, RATE_A)
        try:
            branches.append(
                Branch(
                    from_bus=index[f],
                    to_bus=index[t],
                    r=row[BR_R - 1],
                    x=row[BR_X - 1],
                    b_charging=row[BR_B - 1],
                    s_max=rate / base_mva if rate > 0 else UNLIMITED,
                    in_service=_col(row, BR_STATUS, 1.0) > 0,
                    tap=tap if tap != 0.0 else 1.0,
                    shift=float(np.deg2rad(shift)),
                )
            )
        except NetworkError as exc:
            raise CaseFormatError(str(exc), lineno) from None

    for key in sorted(set(mats) - set(REQUIRED)):
        ignored.append(f"matrix '{key}' ignored")
    for msg in ignored:
        log.warning("%s: %s", name, msg)
    try:
        return Network(
            base_mva=base_mva,
            buses=tuple(buses),
            branches=tuple(branches),
            generators=tuple(generators),
            nominal_pd=np.array(pd),
            nominal_qd=np.array(qd),
            bus_ids=tuple(ids),
            name=name,
            metadata={"ignored": ignored},
        )
    except NetworkError as exc:
        raise CaseFormatError(str(exc)) from None


def _poly_cost(row, lineno, ignored):
    if int(row[MODEL - 1]) != 2:
        raise CaseFormatError("only polynomial gencost (model 2) is supported", lineno)
    n = int(row[NCOST - 1])
    if n > 3:
        raise CaseFormatError(f"polynomial degree {n - 1} > 2 is not supported", lineno)
    coeffs = row[NCOST : NCOST + n]
    if len(coeffs) != n:
        raise CaseFormatError("gencost row shorter than its NCOST", lineno)
    padded = [0.0] * (3 - n) + list(coeffs)
    if padded[2] != 0.0:
        ignored.append(f"line {lineno}: constant cost term c0 ignored")
    return padded[0], padded[1]


def load_case(path_or_name) -> Network:
    """Load a case from a path or from a bundled name (``case30``, ``case57``)."""
    key = str(path_or_name)
    if key in BUNDLED:
        text = resources.files("pdcopf.data").joinpath(BUNDLED[key]).read_text()
        return parse_case(text, name=key)
    path = Path(key)
    if not path.exists():
        raise FileNotFoundError(f"case not found: {key}")
    return parse_case(path.read_text(), name=path.stem)


def case_text(path_or_name) -> str:
    key = str(path_or_name)
    if key in BUNDLED:
        return resources.files("pdcopf.data").joinpath(BUNDLED[key]).read_text()
    return Path(key).read_text()


def serialize_case(network: Network) -> str:
    """Write a MATPOWER case carrying exactly the fields :func:`parse_case` reads."""
    base = network.base_mva
    kind_code = {BusKind.REFERENCE: 3, BusKind.GENERATOR: 2, BusKind.LOAD: 1}
    out = [f"function mpc = {network.name}", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", ""]
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for b, bid, p, q in zip(network.buses, network.bus_ids, network.nominal_pd, network.nominal_qd):
        vals = [bid, kind_code[b.bus_kind], p * base, q * base, b.g_shunt * base, b.b_shunt * base,
                1, 1.0, 0.0, 0, 1, b.v_max, b.v_min]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for g in network.generators:
        vals = [network.bus_ids[g.bus], 0, 0, g.q_max * base, g.q_min * base, 1.0, base, 1,
                g.p_max * base, g.p_min * base]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax",
            "mpc.branch = ["]
    for br in network.branches:
        rate = br.s_max * base if br.limited else 0.0
        vals = [network.bus_ids[br.from_bus], network.bus_ids[br.to_bus], br.r, br.x, br.b_charging,
                rate, rate, rate, br.tap, float(np.rad2deg(br.shift)), int(br.in_service), -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0", "mpc.gencost = ["]
    for g in network.generators:
        vals = [2, 0, 0, 3, g.c2 / base**2, g.c1 / base, 0]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# JSON --------------------------------------------------------------------------

JSON_SCHEMA_VERSION = 1


def network_to_dict(network: Network) -> dict:
    """Canonical JSON-ready dump; all values per-unit, bus references 0-based."""
    return {
        "schema": "pdcopf.network",
        "version": JSON_SCHEMA_VERSION,
        "name": network.name,
        "base_mva": network.base_mva,
        "bus_ids": list(network.bus_ids),
        "buses": [
            {"id": b.id, "g_shunt": b.g_shunt, "b_shunt": b.b_shunt, "v_min": b.v_min,
             "v_max": b.v_max, "bus_kind": b.bus_kind.value}
            for b in network.buses
        ],
        "branches": [
            {"from_bus": br.from_bus, "to_bus": br.to_bus, "r": br.r, "x": br.x,
             "b_charging": br.b_charging, "s_max": br.s_max, "in_service": br.in_service,
             "tap": br.tap, "shift": br.shift}
            for br in network.branches
        ],
        "generators": [
            {"bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min,
             "q_max": g.q_max, "c2": g.c2, "c1": g.c1}
            for g in network.generators
        ],
        "nominal_pd": network.nominal_pd.tolist(),
        "nominal_qd": network.nominal_qd.tolist(),
    }


def network_from_dict(data: dict) -> Network:
    if data.get("schema") != "pdcopf.network":
        raise CaseFormatError("not a pdcopf network dump")
    return Network(
        base_mva=data["base_mva"],
        buses=tuple(Bus(**{**b, "bus_kind": BusKind(b["bus_kind"])}) for b in data["buses"]),
        branches=tuple(Branch(**br) for br in data["branches"]),
        generators=tuple(Generator(**g) for g in data["generators"]),
        nominal_pd=np.array(data["nominal_pd"]),
        nominal_qd=np.array(data["nominal_qd"]),
        bus_ids=tuple(data["bus_ids"]),
        name=data["name"],
    )


def network_to_json(network: Network) -> str:
    return json.dumps(network_to_dict(network), indent=1)


def network_from_json(text: str) -> Network:
    return network_from_dict(json.loads(text))


def network_hash(network: Network) -> str:
    payload = json.dumps(network_to_dict(network), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# topology ------------------------------------------------------------------------


def connectivity_check(network: Network, removed=()) -> bool:
    return network.is_connected(removed)


def bridges(network: Network) -> set[int]:
    """Indices of in-service branches whose removal islands the network.

    Iterative Tarjan lowlink over branch ids, so parallel branches are never
    bridges.
    """
    nb = network.n_bus
    adj = [[] for _ in range(nb)]
    for i in network.active_branches:
        br = network.branches[i]
        adj[br.from_bus].append((br.to_bus, i))
        adj[br.to_bus].append((br.from_bus, i))
    disc = [-1] * nb
    low = [0] * nb
    found = set()
    timer = 0
    for root in range(nb):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nxt, edge in it:
                if edge == via:
                    continue
                if disc[nxt] < 0:
                    disc[nxt] = low[nxt] = timer
                    timer += 1
                    stack.append((nxt, edge, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    found.add(via)
    return found


def enumerate_n_minus_1(network: Network) -> list[TopologyVariant]:
    """One variant per in-service, non-bridge branch, in branch order."""
    cut = bridges(network)
    return [
        TopologyVariant(network.with_branch_out(int(i)), int(i))
        for i in network.active_branches
        if int(i) not in cut
    ]
