"""Unbalanced radial feeder data model, JSON feeder files and ZIP load evaluation.

Phases are always indexed a=0, b=1, c=2. Per-phase quantities are length-3
arrays with zeros on phases that are absent; impedance and admittance
matrices are full 3x3 with zero rows/columns for absent phases.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

PHASES = "abc"
TAP_STEP = 0.00625
DEFAULT_ZIP = (0.4, 0.3, 0.3)
ZIP_CLAMP_PU = 0.5

LENGTH_UNITS = {"ft": 1.0 / 5280.0, "mi": 1.0, "kft": 1000.0 / 5280.0, "m": 1.0 / 1609.344, "km": 1000.0 / 1609.344}


class FeederError(ValueError):
    """Base class for feeder file problems."""


class FeederSyntaxError(FeederError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"syntax error{where}: {message}")


class FeederSemanticError(FeederError):
    def __init__(self, element, message):
        self.element = element
        super().__init__(f"{element}: {message}")


def phase_mask(phases):
    return np.array([p in phases for p in PHASES], dtype=bool)


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class Bus:
    id: str
    kv_ll: float
    phases: str = "abc"

    @property
    def mask(self):
        return phase_mask(self.phases)

    @property
    def v_base(self):
        """Line-to-neutral RMS base voltage in volts."""
        return self.kv_ll * 1000.0 / np.sqrt(3.0)


@dataclass(eq=False)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    z: np.ndarray  # 3x3 series impedance, ohm
    y: np.ndarray = None  # 3x3 total shunt admittance, S

    def __post_init__(self):
        self.z = _readonly(self.z, complex)
        self.y = _readonly(np.zeros((3, 3)) if self.y is None else self.y, complex)


@dataclass(eq=False)
class Load:
    id: str
    bus: str
    phases: str
    p_kw: np.ndarray
    q_kvar: np.ndarray
    zip_p: tuple = DEFAULT_ZIP
    zip_q: tuple = DEFAULT_ZIP

    def __post_init__(self):
        self.p_kw = _readonly(self.p_kw)
        self.q_kvar = _readonly(self.q_kvar)
        self.zip_p = tuple(float(c) for c in self.zip_p)
        self.zip_q = tuple(float(c) for c in self.zip_q)

    @property
    def s_kva(self):
        return self.p_kw + 1j * self.q_kvar


@dataclass(eq=False)
class ShuntCap:
    id: str
    bus: str
    phases: str
    kvar: np.ndarray
    closed: bool = True
    conn: str = "Yg"

    def __post_init__(self):
        self.kvar = _readonly(self.kvar)


@dataclass(eq=False)
class Regulator:
    id: str
    branch: str
    taps: tuple = (0, 0, 0)

    @property
    def ratio(self):
        return 1.0 + TAP_STEP * np.asarray(self.taps, dtype=float)


@dataclass(eq=False)
class FeederModel:
    buses: list
    branches: list
    loads: list = field(default_factory=list)
    shunt_caps: list = field(default_factory=list)
    regulators: list = field(default_factory=list)
    slack_bus_id: str = None
    name: str = ""

    def __post_init__(self):
        self.buses = tuple(self.buses)
        self.branches = tuple(self.branches)
        self.loads = tuple(self.loads)
        self.shunt_caps = tuple(self.shunt_caps)
        self.regulators = tuple(self.regulators)

    def __eq__(self, other):
        if not isinstance(other, FeederModel):
            return NotImplemented
        return to_dict(self) == to_dict(other)

    __hash__ = object.__hash__

    @cached_property
    def bus_map(self):
        return {b.id: b for b in self.buses}

    @cached_property
    def branch_map(self):
        return {br.id: br for br in self.branches}

    @cached_property
    def parent_branch(self):
        """bus id -> branch feeding it (slack maps to None)."""
        out = {self.slack_bus_id: None}
        for br in self.branches:
            out[br.to_bus] = br
        return out

    @cached_property
    def children(self):
        out = {b.id: [] for b in self.buses}
        for br in self.branches:
            out[br.from_bus].append(br)
        return out

    @cached_property
    def order(self):
        """Bus ids in breadth-first order from the slack."""
        seen = [self.slack_bus_id]
        queue = deque([self.slack_bus_id])
        while queue:
            b = queue.popleft()
            for br in self.children[b]:
                seen.append(br.to_bus)
                queue.append(br.to_bus)
        return tuple(seen)

    @cached_property
    def regulator_by_branch(self):
        return {r.branch: r for r in self.regulators}

    def path_to(self, bus_id):
        """Branches from the slack down to ``bus_id``."""
        if bus_id not in self.bus_map:
            raise KeyError(f"unknown bus {bus_id!r}")
        path = []
        b = bus_id
        while b != self.slack_bus_id:
            br = self.parent_branch[b]
            path.append(br)
            b = br.from_bus
        return path[::-1]

    @property
    def slack(self):
        return self.bus_map[self.slack_bus_id]


# ---------------------------------------------------------------- evaluation


def zip_factor(v_pu, coeffs):
    """Load multiplier ``az*V^2 + ai*V + ap`` with the low-voltage clamp.

    Below ``ZIP_CLAMP_PU`` the constant-power share turns into constant
    impedance so the current stays bounded when the voltage collapses.
    """
    v = np.asarray(v_pu, dtype=float)
    az, ai, ap = coeffs
    p_term = np.where(v >= ZIP_CLAMP_PU, ap, ap * (v / ZIP_CLAMP_PU) ** 2)
    return az * v * v + ai * v + p_term


def zip_power(load, v_pu):
    """Per-phase complex power (kW + j kVAr) consumed by ``load`` at ``v_pu``."""
    v = np.broadcast_to(np.asarray(v_pu, dtype=float), (3,))
    return load.p_kw * zip_factor(v, load.zip_p) + 1j * load.q_kvar * zip_factor(v, load.zip_q)


def equivalent_series_impedance(model, bus_id):
    """Sum of the 3x3 series impedances from the slack down to ``bus_id``."""
    z = np.zeros((3, 3), dtype=complex)
    for br in model.path_to(bus_id):
        z = z + br.z
    return z


# ------------------------------------------------------------------ file I/O


def _cmat(obj, key, where):
    if obj is None:
        return None
    if isinstance(obj, dict):
        try:
            re = np.array(obj.get("r", obj.get("g", np.zeros((3, 3)))), dtype=float)
            im = np.array(obj.get("x", obj.get("b", np.zeros((3, 3)))), dtype=float)
        except (TypeError, ValueError) as exc:
            raise FeederSemanticError(where, f"bad {key} matrix: {exc}") from None
        m = re + 1j * im
    else:
        raise FeederSemanticError(where, f"{key} must be an object with 3x3 real/imag parts")
    if m.shape != (3, 3):
        raise FeederSemanticError(where, f"{key} must be 3x3, got {m.shape}")
    return m


def _vec3(values, phases, where, key):
    arr = np.zeros(3)
    if values is None:
        return arr
    if isinstance(values, (int, float)):
        values = [values] * len(phases)
    if isinstance(values, dict):
        for p, val in values.items():
            if p not in PHASES:
                raise FeederSemanticError(where, f"{key}: unknown phase {p!r}")
            arr[PHASES.index(p)] = float(val)
        return arr
    values = list(values)
    if len(values) == 3:
        return np.array(values, dtype=float)
    if len(values) != len(phases):
        raise FeederSemanticError(where, f"{key} needs one value per phase ({phases})")
    for p, val in zip(phases, values):
        arr[PHASES.index(p)] = float(val)
    return arr


def _zip_coeffs(raw, where):
    coeffs = tuple(float(c) for c in (raw if raw is not None else DEFAULT_ZIP))
    if len(coeffs) != 3:
        raise FeederSemanticError(where, "ZIP coefficients must be a triple")
    if abs(sum(coeffs) - 1.0) > 1e-9:
        raise FeederSemanticError(where, f"ZIP coefficients {coeffs} sum to {sum(coeffs)!r}, not 1")
    return coeffs


def _branch_impedance(raw, linecodes, where):
    if "z" in raw:
        return _cmat(raw["z"], "z", where), _cmat(raw.get("y"), "y", where)
    code_id = raw.get("linecode")
    if code_id is None:
        raise FeederSemanticError(where, "branch needs either 'z' or 'linecode'")
    if code_id not in linecodes:
        raise FeederSemanticError(where, f"unknown linecode {code_id!r}")
    code = linecodes[code_id]
    unit = raw.get("length_unit", "ft")
    if unit not in LENGTH_UNITS:
        raise FeederSemanticError(where, f"unknown length unit {unit!r}")
    miles = float(raw["length"]) * LENGTH_UNITS[unit]
    z = _cmat(code["z_per_mile"], "z_per_mile", f"linecode {code_id}") * miles
    y = code.get("y_per_mile")
    y = None if y is None else _cmat(y, "y_per_mile", f"linecode {code_id}") * miles
    return z, y


def from_dict(data, name=""):
    """Build and validate a FeederModel from the parsed JSON document."""
    if not isinstance(data, dict):
        raise FeederSemanticError("document", "top level must be an object")
    for key in ("buses", "branches", "slack"):
        if key not in data:
            raise FeederSemanticError("document", f"missing top-level key {key!r}")
    linecodes = data.get("linecodes", {})

    buses = []
    for i, raw in enumerate(data["buses"]):
        where = f"bus {raw.get('id', i)!s}"
        bid = str(raw["id"])
        phases = raw.get("phases", "abc")
        if not phases or any(p not in PHASES for p in phases):
            raise FeederSemanticError(where, f"bad phases {phases!r}")
        buses.append(Bus(bid, float(raw["kv"]), "".join(p for p in PHASES if p in phases)))
    bus_map = {}
    for b in buses:
        if b.id in bus_map:
            raise FeederSemanticError(f"bus {b.id}", "duplicate bus id")
        bus_map[b.id] = b

    def need_bus(bid, where):
        bid = str(bid)
        if bid not in bus_map:
            raise FeederSemanticError(where, f"references unknown bus {bid}")
        return bus_map[bid]

    branches = []
    for i, raw in enumerate(data["branches"]):
        brid = str(raw.get("id", f"br{i}"))
        where = f"branch {brid}"
        fb = need_bus(raw["from"], where)
        tb = need_bus(raw["to"], where)
        phases = "".join(p for p in PHASES if p in raw.get("phases", tb.phases))
        z, y = _branch_impedance(raw, linecodes, where)
        branches.append(Branch(brid, fb.id, tb.id, phases, z, y))

    slack = str(data["slack"])
    need_bus(slack, "slack")
    branches = _orient_radial(bus_map, branches, slack)

    for br in branches:
        fb, tb = bus_map[br.from_bus], bus_map[br.to_bus]
        if not set(br.phases) <= set(fb.phases):
            raise FeederSemanticError(f"branch {br.id}", f"phases {br.phases} not present at bus {fb.id}")
        if set(tb.phases) != set(br.phases):
            raise FeederSemanticError(f"branch {br.id}", f"phases {br.phases} differ from bus {tb.id} phases {tb.phases}")

    loads = []
    for i, raw in enumerate(data.get("loads", [])):
        lid = str(raw.get("id", f"load{i}"))
        where = f"load {lid}"
        bus = need_bus(raw["bus"], where)
        phases = "".join(p for p in PHASES if p in raw.get("phases", bus.phases))
        if not set(phases) <= set(bus.phases):
            raise FeederSemanticError(where, f"phases {phases} not present at bus {bus.id}")
        zp = _zip_coeffs(raw.get("zip_p", raw.get("zip")), where)
        zq = _zip_coeffs(raw.get("zip_q", raw.get("zip")), where)
        loads.append(Load(lid, bus.id, phases, _vec3(raw.get("p_kw"), phases, where, "p_kw"),
                          _vec3(raw.get("q_kvar"), phases, where, "q_kvar"), zp, zq))

    caps = []
    for i, raw in enumerate(data.get("shunt_caps", [])):
        cid = str(raw.get("id", f"cap{i}"))
        where = f"shunt_cap {cid}"
        bus = need_bus(raw["bus"], where)
        phases = "".join(p for p in PHASES if p in raw.get("phases", bus.phases))
        if not set(phases) <= set(bus.phases):
            raise FeederSemanticError(where, f"phases {phases} not present at bus {bus.id}")
        conn = raw.get("conn", "Yg")
        if conn != "Yg":
            raise FeederSemanticError(where, f"only Yg capacitor banks are supported, got {conn!r}")
        caps.append(ShuntCap(cid, bus.id, phases, _vec3(raw.get("kvar"), phases, where, "kvar"),
                             bool(raw.get("closed", True)), conn))

    branch_ids = {br.id for br in branches}
    regs = []
    for i, raw in enumerate(data.get("regulators", [])):
        rid = str(raw.get("id", f"reg{i}"))
        where = f"regulator {rid}"
        if str(raw["branch"]) not in branch_ids:
            raise FeederSemanticError(where, f"references unknown branch {raw['branch']}")
        taps = raw.get("taps", [0, 0, 0])
        if len(taps) != 3:
            raise FeederSemanticError(where, "taps must list three phases")
        regs.append(Regulator(rid, str(raw["branch"]), tuple(int(t) for t in taps)))

    return FeederModel(buses, branches, loads, caps, regs, slack, name=data.get("name", name))


def _orient_radial(bus_map, branches, slack):
    adj = {b: [] for b in bus_map}
    for br in branches:
        if br.from_bus == br.to_bus:
            raise FeederSemanticError(f"branch {br.id}", "connects a bus to itself")
        adj[br.from_bus].append(br)
        adj[br.to_bus].append(br)
    if len(branches) != len(bus_map) - 1:
        raise FeederSemanticError("topology", f"not radial: {len(branches)} branches for {len(bus_map)} buses")
    parent = {slack: None}
    oriented = []
    queue = deque([slack])
    while queue:
        b = queue.popleft()
        for br in adj[b]:
            if br is parent[b]:
                continue
            other = br.to_bus if br.from_bus == b else br.from_bus
            if other in parent:
                raise FeederSemanticError(f"branch {br.id}", "closes a loop; feeder is not radial")
            parent[other] = br
            if br.from_bus != b:
                br = Branch(br.id, b, other, br.phases, br.z, br.y)
            oriented.append(br)
            queue.append(other)
    missing = sorted(set(bus_map) - set(parent))
    if missing:
        raise FeederSemanticError(f"bus {missing[0]}", f"not connected to slack {slack} ({len(missing)} buses unreachable)")
    return oriented


def parse_feeder(text, name=""):
    """Parse feeder JSON text into a validated FeederModel."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return from_dict(data, name=name)


def load_feeder(path):
    """Load a feeder from a path, or a bundled one via ``builtin:<name>``."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        text = resources.files("emtts.data").joinpath(f"{name}.json").read_text(encoding="utf-8")
        return parse_feeder(text, name=name)
    return parse_feeder(Path(path).read_text(encoding="utf-8"), name=Path(path).stem)


def _mat_json(m, re_key, im_key):
    return {re_key: np.real(m).tolist(), im_key: np.imag(m).tolist()}


def _per_phase(values, phases):
    return [float(values[PHASES.index(p)]) for p in phases]


def to_dict(model):
    """Inverse of ``from_dict``; impedances are written fully resolved."""
    out = {
        "name": model.name,
        "slack": model.slack_bus_id,
        "buses": [{"id": b.id, "kv": b.kv_ll, "phases": b.phases} for b in model.buses],
        "branches": [],
        "loads": [],
        "shunt_caps": [],
        "regulators": [],
    }
    for br in model.branches:
        item = {"id": br.id, "from": br.from_bus, "to": br.to_bus, "phases": br.phases,
                "z": _mat_json(br.z, "r", "x")}
        if np.any(br.y != 0):
            item["y"] = _mat_json(br.y, "g", "b")
        out["branches"].append(item)
    for ld in model.loads:
        out["loads"].append({"id": ld.id, "bus": ld.bus, "phases": ld.phases,
                             "p_kw": _per_phase(ld.p_kw, ld.phases), "q_kvar": _per_phase(ld.q_kvar, ld.phases),
                             "zip_p": list(ld.zip_p), "zip_q": list(ld.zip_q)})
    for cap in model.shunt_caps:
        out["shunt_caps"].append({"id": cap.id, "bus": cap.bus, "phases": cap.phases,
                                  "kvar": _per_phase(cap.kvar, cap.phases), "closed": cap.closed, "conn": cap.conn})
    for reg in model.regulators:
        out["regulators"].append({"id": reg.id, "branch": reg.branch, "taps": list(reg.taps)})
    return out


def serialize_feeder(model):
    return json.dumps(to_dict(model), indent=1)
