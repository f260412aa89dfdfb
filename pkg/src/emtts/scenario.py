"""Scenario files: feeder reference, microgrid device, coupling settings and events."""
import hashlib
import json
import re
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .coupling import CouplingConfig
from .emt import GridFormingConfig, PllConfig
from .feeder import DEFAULT_ZIP, FeederError, Load, load_feeder

EVENT_KINDS = ("load_step", "cap_switch", "coupling_mode")
POW_MODES = ("immediate", "peak", "zero")

_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6}


class ScenarioError(ValueError):
    pass


def parse_time(value):
    """Seconds from a number or a string such as ``"2ms"`` or ``"100us"``."""
    if isinstance(value, (int, float)):
        return float(value)
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([a-zµ]*)\s*", str(value))
    if not m or m.group(2) not in _UNITS | {"": 1.0}:
        raise ScenarioError(f"bad time value {value!r}")
    return float(m.group(1)) * _UNITS.get(m.group(2), 1.0)


@dataclass
class Event:
    time: float
    kind: str
    params: dict = field(default_factory=dict)
    pow: object = "immediate"  # "immediate", "peak", "zero" or an angle in degrees

    def describe(self):
        what = self.params.get("id") or self.params.get("cap") or self.params.get("mode") or ""
        return f"{self.kind}:{what}"


@dataclass
class Scenario:
    feeder: object  # FeederModel
    feeder_ref: str = ""
    microgrid: GridFormingConfig = field(default_factory=GridFormingConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    events: list = field(default_factory=list)
    record: list = field(default_factory=list)
    duration: float = 0.5
    pacing: str = "free"
    testbed: str = "cosim"
    release: float = 0.1  # device controllers held at their initial point until here
    taps: dict = field(default_factory=dict)
    switch_states: dict = field(default_factory=dict)
    secondary: list = field(default_factory=list)  # cap ids moved to the EMT side
    pll: PllConfig = field(default_factory=PllConfig)
    name: str = ""
    source_hash: str = ""
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        m = self.feeder
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.pacing not in ("free", "realtime"):
            raise ScenarioError(f"unknown pacing {self.pacing!r}")
        if self.testbed not in ("cosim", "full_emt"):
            raise ScenarioError(f"unknown testbed {self.testbed!r}")
        caps = {c.id for c in m.shunt_caps}
        regs = {r.id for r in m.regulators}
        for cid in list(self.switch_states) + list(self.secondary):
            if cid not in caps:
                raise ScenarioError(f"unknown capacitor {cid!r}")
        for rid in self.taps:
            if rid not in regs:
                raise ScenarioError(f"unknown regulator {rid!r}")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ScenarioError("events must be sorted by time")
        step_ids = set()
        for ev in self.events:
            if ev.kind not in EVENT_KINDS:
                raise ScenarioError(f"unknown event kind {ev.kind!r}")
            if not isinstance(ev.pow, (int, float)) and ev.pow not in POW_MODES:
                raise ScenarioError(f"unknown point-on-wave target {ev.pow!r}")
            if ev.kind == "load_step":
                if ev.params.get("on", True):
                    if ev.params["bus"] not in m.bus_map:
                        raise ScenarioError(f"load step references unknown bus {ev.params['bus']!r}")
                    step_ids.add(ev.params["id"])
                elif ev.params["id"] not in step_ids:
                    raise ScenarioError(f"load step {ev.params['id']!r} removed before it was added")
            elif ev.kind == "cap_switch":
                if ev.params["cap"] not in caps:
                    raise ScenarioError(f"unknown capacitor {ev.params['cap']!r}")
            elif ev.params.get("mode") not in ("direct", "interpolated"):
                raise ScenarioError(f"unknown coupling mode {ev.params.get('mode')!r}")

    def step_loads(self):
        """Load objects for every load-step id, in event order."""
        out = {}
        for ev in self.events:
            if ev.kind == "load_step" and ev.params.get("on", True):
                out[ev.params["id"]] = step_load(ev.params)
        return out

    def with_overrides(self, **kw):
        """Copy with top-level or coupling fields replaced (``coupling_mode=...`` etc.)."""
        coup = {}
        top = {}
        cf = {f.name for f in fields(CouplingConfig)}
        for k, v in kw.items():
            if k.startswith("coupling_") and k[9:] in cf:
                coup[k[9:]] = v
            else:
                top[k] = v
        new = replace(self, **top)
        if coup:
            c = self.coupling
            if "H" in coup and "delay" not in coup and c.delay == c.H:
                coup["delay"] = coup["H"]
            new.coupling = replace(c, **coup)
        return new


def step_load(params):
    p = [float(x) for x in params.get("p_kw", [0, 0, 0])]
    q = [float(x) for x in params.get("q_kvar", [0, 0, 0])]
    phases = "".join(ph for ph, a, b in zip("abc", p, q) if a != 0 or b != 0)
    zp = tuple(params.get("zip_p", params.get("zip", DEFAULT_ZIP)))
    zq = tuple(params.get("zip_q", params.get("zip", DEFAULT_ZIP)))
    return Load(params["id"], params["bus"], phases, p, q, zp, zq)


def _event(raw, i):
    try:
        kind = raw["kind"]
        t = parse_time(raw["time"])
    except KeyError as e:
        raise ScenarioError(f"event {i}: missing key {e}") from None
    params = {k: v for k, v in raw.items() if k not in ("time", "kind", "pow")}
    if kind == "load_step":
        params.setdefault("id", f"step{i}")
    pw = raw.get("pow", "immediate")
    return Event(t, kind, params, pw)


def resolve_path(ref, base_dir):
    if ref.startswith("builtin:"):
        return ref
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return str(p)


def scenario_from_dict(d, base_dir=None, source_hash=""):
    if "feeder" not in d:
        raise ScenarioError("scenario has no 'feeder' entry")
    feeder_ref = resolve_path(d["feeder"], base_dir)
    try:
        model = load_feeder(feeder_ref)
    except FileNotFoundError:
        raise ScenarioError(f"feeder file not found: {feeder_ref}") from None
    mg = dict(d.get("microgrid", {}))
    kind = mg.get("kind", "bess")
    gfm = GridFormingConfig.genset(**{k: v for k, v in mg.items() if k != "kind"}) if kind == "genset" \
        else GridFormingConfig(**mg)
    c = dict(d.get("coupling", {}))
    for key in ("h", "H", "delay"):
        if key in c and c[key] is not None:
            c[key] = parse_time(c[key])
    coupling = CouplingConfig(**c)
    events = [_event(e, i) for i, e in enumerate(d.get("events", []))]
    events.sort(key=lambda e: e.time)
    pll = PllConfig(**d.get("pll", {}))
    return Scenario(
        feeder=model, feeder_ref=feeder_ref, microgrid=gfm, coupling=coupling, events=events,
        record=list(d.get("record", [])), duration=parse_time(d.get("duration", 0.5)),
        pacing=d.get("pacing", "free"), testbed=d.get("testbed", "cosim"),
        release=parse_time(d.get("release", 0.1)), taps=dict(d.get("taps", {})),
        switch_states=dict(d.get("switch_states", {})), secondary=list(d.get("secondary", [])),
        pll=pll, name=d.get("name", ""), source_hash=source_hash, raw=d)


def parse_scenario(text, base_dir=None):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario syntax error at line {e.lineno} column {e.colno}: {e.msg}") from None
    digest = hashlib.sha256(text.encode()).hexdigest()
    try:
        return scenario_from_dict(d, base_dir, digest)
    except (TypeError, KeyError, FeederError) as e:
        raise ScenarioError(f"invalid scenario: {e}") from None


def load_scenario(path):
    """Load from a path or ``builtin:<name>`` for the bundled scenarios."""
    if str(path).startswith("builtin:"):
        name = str(path)[8:]
        text = resources.files("emtts.data").joinpath(f"scenarios/{name}.json").read_text()
        return parse_scenario(text, None)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"scenario file not found: {p}")
    return parse_scenario(p.read_text(), p.parent)
