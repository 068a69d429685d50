"""Grid data model, M-case text parsing, and integrated-case configuration.

Networks are plain immutable records in physical units (MW, Mvar, $/MWh);
impedances and shunts are per-unit on the case base.  A distribution feeder
uses the same :class:`Network` type as a transmission grid; its slack bus is
the root node where the feeder meets the transmission system.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# M-case tables the model actually uses; anything else is skipped with a warning.
_KNOWN_TABLES = ("bus", "gen", "branch", "gencost")


class McaseParseError(ValueError):
    """Raised for malformed M-case text; message carries line number and field."""


class ConfigError(ValueError):
    """Raised for inconsistent integrated-case configuration."""


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0   # MW
    q_load: float = 0.0   # Mvar
    g_shunt: float = 0.0  # p.u. conductance to ground
    b_shunt: float = 0.0  # p.u. susceptance to ground
    v_min: float = 0.94   # p.u.
    v_max: float = 1.06   # p.u.

    def validate(self):
        if not (0.0 < self.v_min <= self.v_max):
            raise ConfigError(f"bus {self.id}: need 0 < v_min <= v_max, "
                              f"got [{self.v_min}, {self.v_max}]")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float                 # p.u.
    x: float                 # p.u.
    b_charging: float = 0.0  # p.u. total line charging susceptance
    flow_limit: float = 0.0  # MVA apparent power, 0 = unlimited
    tap_ratio: float = 1.0
    status: bool = True

    def validate(self):
        if self.r < 0.0:
            raise ConfigError(f"branch {self.from_bus}-{self.to_bus}: r < 0")
        if self.x == 0.0:
            raise ConfigError(f"branch {self.from_bus}-{self.to_bus}: x must be nonzero")
        if self.tap_ratio <= 0.0:
            raise ConfigError(f"branch {self.from_bus}-{self.to_bus}: tap_ratio <= 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float              # MW
    p_max: float              # MW
    q_min: float              # Mvar
    q_max: float              # Mvar
    cost_linear: float = 0.0     # $/MWh
    cost_quadratic: float = 0.0  # $/MW^2h
    p_fixed: float | None = None  # MW; set when p_min == p_max pins the unit

    def validate(self):
        if self.p_min > self.p_max:
            raise ConfigError(f"generator at bus {self.bus}: p_min > p_max")
        if self.q_min > self.q_max:
            raise ConfigError(f"generator at bus {self.bus}: q_min > q_max")
        if self.p_fixed is not None and not (self.p_min <= self.p_fixed <= self.p_max):
            raise ConfigError(f"generator at bus {self.bus}: p_fixed outside [p_min, p_max]")


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    slack_bus: int
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.base_mva <= 0.0:
            raise ConfigError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bus ids")
        known = set(ids)
        if self.slack_bus not in known:
            raise ConfigError(f"slack bus {self.slack_bus} not in bus table")
        if not any(g.bus == self.slack_bus for g in self.generators):
            raise ConfigError(f"slack bus {self.slack_bus} carries no generator")
        for b in self.buses:
            b.validate()
        for br in self.branches:
            br.validate()
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise ConfigError(f"branch {br.from_bus}-{br.to_bus} references "
                                      f"unknown bus {end}")
        for g in self.generators:
            g.validate()
            if g.bus not in known:
                raise ConfigError(f"generator references unknown bus {g.bus}")

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in ``buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)


@dataclass(frozen=True)
class Feeder:
    """One distribution network hanging off a transmission interface bus."""
    network: Network
    interface_bus: int  # transmission bus id
    root_node: int      # distribution bus id, must be the feeder's slack bus


@dataclass(frozen=True)
class IntegratedCase:
    transmission: Network
    feeders: tuple[Feeder, ...]
    purchase_price: float      # $/MWh paid by each DSO for imported energy
    alpha: float               # perturbation half-width; 0 collapses the window to a point
    mismatch_tol: float        # p.u. on the transmission base
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        t_ids = {b.id for b in self.transmission.buses}
        seen = set()
        for f in self.feeders:
            if f.interface_bus in seen:
                raise ConfigError(f"two feeders mapped to transmission bus {f.interface_bus}")
            seen.add(f.interface_bus)
            if f.interface_bus not in t_ids:
                raise ConfigError(f"interface bus {f.interface_bus} not in transmission network")
            if f.root_node != f.network.slack_bus:
                raise ConfigError(f"feeder root node {f.root_node} is not its slack bus "
                                  f"({f.network.slack_bus})")
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.mismatch_tol <= 0.0:
            raise ConfigError("mismatch_tol must be positive")


# ---------------------------------------------------------------------------
# M-case parsing
# ---------------------------------------------------------------------------

def _split_row(line: str) -> list[float]:
    body = line.split("%")[0].replace(";", " ").strip()
    return [float(tok) for tok in body.split()] if body else []


def parse_mcase(text: str, name: str = "") -> Network:
    """Parse MATPOWER-style case text into a :class:`Network`.

    Reads the ``baseMVA``, ``bus``, ``gen``, ``branch`` and ``gencost``
    tables; other tables are ignored with a warning.  Quantities are
    converted so the returned network follows this module's unit
    conventions (loads in MW/Mvar, shunts in p.u.).
    """
    base_mva = None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("%")[0].strip()
        if not line:
            continue
        if current is None:
            m = re.match(r"mpc\.(\w+)\s*=\s*(.*)$", line)
            if not m:
                continue  # function header, comments, etc.
            key, rest = m.group(1), m.group(2)
            if key == "baseMVA":
                try:
                    base_mva = float(rest.rstrip(";").strip())
                except ValueError:
                    raise McaseParseError(f"line {lineno}: malformed baseMVA value") from None
                continue
            if not rest.startswith("["):
                continue  # scalar/string assignment such as mpc.version
            if key not in _KNOWN_TABLES:
                log.warning("ignoring unsupported M-case table %r", key)
                current = ("__skip__", None)
                if rest.rstrip().endswith("];"):
                    current = None
                continue
            tables[key] = []
            current = (key, tables[key])
            rest = rest[1:].strip()
            if rest.endswith("];"):
                row = _parse_table_row(rest[:-2], key, lineno)
                if row:
                    current[1].append((lineno, row))
                current = None
            elif rest:
                current[1].append((lineno, _parse_table_row(rest, key, lineno)))
        else:
            key, rows = current
            closing = line.endswith("];") or line == "]"
            body = line[:-2] if line.endswith("];") else (line[:-1] if line == "]" else line)
            if key != "__skip__" and body.strip():
                row = _parse_table_row(body, key, lineno)
                if row:
                    rows.append((lineno, row))
            if closing:
                current = None

    if base_mva is None:
        raise McaseParseError("missing mpc.baseMVA")
    for required in ("bus", "gen", "branch"):
        if required not in tables or not tables[required]:
            raise McaseParseError(f"missing mpc.{required} table")

    buses, slack = _build_buses(tables["bus"], base_mva)
    known = {b.id for b in buses}
    generators = _build_generators(tables["gen"], tables.get("gencost", []), known)
    branches = _build_branches(tables["branch"], known)
    if slack is None:
        raise McaseParseError("bus table declares no slack bus (type 3)")
    return Network(base_mva=base_mva, buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(generators), slack_bus=slack, name=name)


def _parse_table_row(body: str, key: str, lineno: int) -> list[float]:
    try:
        return _split_row(body)
    except ValueError as exc:
        raise McaseParseError(f"line {lineno}: malformed {key} row: {exc}") from None


def _build_buses(rows, base_mva):
    buses, slack = [], None
    for lineno, row in rows:
        if len(row) < 13:
            raise McaseParseError(f"line {lineno}: bus row needs 13 columns, got {len(row)}")
        bus_id, bus_type = int(row[0]), int(row[1])
        if bus_type == 3:
            if slack is not None:
                raise McaseParseError(f"line {lineno}: second slack bus {bus_id}")
            slack = bus_id
        buses.append(Bus(id=bus_id, p_load=row[2], q_load=row[3],
                         g_shunt=row[4] / base_mva, b_shunt=row[5] / base_mva,
                         v_min=row[12], v_max=row[11]))
    return buses, slack


def _build_generators(rows, cost_rows, known):
    gens = []
    for lineno, row in rows:
        if len(row) < 10:
            raise McaseParseError(f"line {lineno}: gen row needs 10 columns, got {len(row)}")
        bus = int(row[0])
        if bus not in known:
            raise McaseParseError(f"line {lineno}: gen references unknown bus {bus}")
        if int(row[7]) == 0:
            log.warning("dropping out-of-service generator at bus %d", bus)
            continue
        p_min, p_max = row[9], row[8]
        gens.append(Generator(bus=bus, p_min=p_min, p_max=p_max,
                              q_min=row[4], q_max=row[3],
                              p_fixed=p_min if p_min == p_max else None))
    for i, (lineno, row) in enumerate(cost_rows):
        if i >= len(gens):
            break
        if len(row) < 4 or int(row[0]) != 2:
            raise McaseParseError(f"line {lineno}: only polynomial gencost (model 2) supported")
        ncost = int(row[3])
        coeffs = row[4:4 + ncost]
        if len(coeffs) != ncost:
            raise McaseParseError(f"line {lineno}: gencost row shorter than ncost={ncost}")
        c2 = coeffs[-3] if ncost >= 3 else 0.0
        c1 = coeffs[-2] if ncost >= 2 else 0.0
        gens[i] = replace(gens[i], cost_linear=c1, cost_quadratic=c2)
    return gens


def _build_branches(rows, known):
    branches = []
    for lineno, row in rows:
        if len(row) < 11:
            raise McaseParseError(f"line {lineno}: branch row needs 11 columns, got {len(row)}")
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in known:
                raise McaseParseError(f"line {lineno}: branch references unknown bus {end}")
        tap = row[8] if row[8] != 0.0 else 1.0
        branches.append(Branch(from_bus=f, to_bus=t, r=row[2], x=row[3], b_charging=row[4],
                               flow_limit=row[5], tap_ratio=tap, status=bool(int(row[10]))))
    return branches


def write_mcase(net: Network, name: str = "mpc") -> str:
    """Serialize a network back to M-case text (lossless round trip)."""
    out = [f"function mpc = {name}", "mpc.version = '2';",
           f"mpc.baseMVA = {net.base_mva:.17g};", "", "mpc.bus = ["]
    for b in net.buses:
        bus_type = 3 if b.id == net.slack_bus else 1
        out.append(f"\t{b.id}\t{bus_type}\t{b.p_load:.17g}\t{b.q_load:.17g}\t"
                   f"{b.g_shunt * net.base_mva:.17g}\t{b.b_shunt * net.base_mva:.17g}\t"
                   f"1\t1\t0\t0\t1\t{b.v_max:.17g}\t{b.v_min:.17g};")
    out.append("];")
    out.append("")
    out.append("mpc.gen = [")
    for g in net.generators:
        out.append(f"\t{g.bus}\t0\t0\t{g.q_max:.17g}\t{g.q_min:.17g}\t1\t"
                   f"{net.base_mva:.17g}\t1\t{g.p_max:.17g}\t{g.p_min:.17g};")
    out.append("];")
    out.append("")
    out.append("mpc.branch = [")
    for br in net.branches:
        tap = 0.0 if br.tap_ratio == 1.0 else br.tap_ratio
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{br.r:.17g}\t{br.x:.17g}\t"
                   f"{br.b_charging:.17g}\t{br.flow_limit:.17g}\t0\t0\t{tap:.17g}\t0\t"
                   f"{1 if br.status else 0};")
    out.append("];")
    out.append("")
    out.append("mpc.gencost = [")
    for g in net.generators:
        out.append(f"\t2\t0\t0\t3\t{g.cost_quadratic:.17g}\t{g.cost_linear:.17g}\t0;")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Bus admittance matrix
# ---------------------------------------------------------------------------

def build_ybus(net: Network) -> np.ndarray:
    """Dense complex bus admittance matrix over in-service branches and shunts."""
    n = net.n_bus
    idx = net.bus_index()
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        if not br.status:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        tau = br.tap_ratio
        Y[i, i] += (ys + bc) / tau**2
        Y[j, j] += ys + bc
        Y[i, j] += -ys / tau
        Y[j, i] += -ys / tau
    for b in net.buses:
        k = idx[b.id]
        Y[k, k] += complex(b.g_shunt, b.b_shunt)
    return Y


# ---------------------------------------------------------------------------
# Integrated case loading
# ---------------------------------------------------------------------------

def load_integrated_case(path: str | Path) -> IntegratedCase:
    """Load an integrated T-D case description from a JSON document.

    Relative M-case paths are resolved against the JSON file's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"case file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None

    for key in ("transmission", "feeders", "purchase_price_per_mwh", "alpha", "mismatch_tol_pu"):
        if key not in doc:
            raise ConfigError(f"{path}: missing key {key!r}")

    def read_net(rel):
        case_path = (path.parent / rel).resolve()
        if not case_path.exists():
            raise ConfigError(f"{path}: referenced case file not found: {rel}")
        return parse_mcase(case_path.read_text(), name=Path(rel).stem)

    transmission = read_net(doc["transmission"])
    feeders = []
    for spec in doc["feeders"]:
        feeders.append(Feeder(network=read_net(spec["case"]),
                              interface_bus=int(spec["interface_bus"]),
                              root_node=int(spec["root_node"])))
    return IntegratedCase(transmission=transmission, feeders=tuple(feeders),
                          purchase_price=float(doc["purchase_price_per_mwh"]),
                          alpha=float(doc["alpha"]),
                          mismatch_tol=float(doc["mismatch_tol_pu"]),
                          name=path.stem)


def bundled_case_path(filename: str) -> Path:
    """Path of a case file shipped with the package."""
    return Path(__file__).parent / "cases" / filename
