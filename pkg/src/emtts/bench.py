"""Full-EMT benchmark and the metrics used to compare it with the co-simulation.

The benchmark puts the whole feeder into the EMT engine: branches become
coupled series R-L blocks with half the line charging at each end, caps
become switchable wye-grounded capacitances, and ZIP loads become their
nominal-voltage R and L (or C) plus a correction current. The correction
scales the element currents by ``zip(V)/V^2 - 1`` with V the RMS voltage of
the previous step, so the nodal matrix only changes when something switches.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .coupling import ExtractionWindow, sliding_cycle_mean
from .emt import TWO_PI, EmtNetwork, GridFormingUnit
from .feeder import PHASES, ZIP_CLAMP_PU
from .orchestrator import EmtTestbed, initial_operating_point, scenario_switch_states
from .phasor import PhasorSolver
from .records import ChannelGroup, RunRecord
from .scenario import ScenarioError


class SteadyStateError(ValueError):
    def __init__(self, message, channel=None, drift=None):
        self.channel = channel
        self.drift = drift
        super().__init__(message)


# ------------------------------------------------------------ construction


@dataclass
class FullEmtParts:
    net: EmtNetwork
    gfm: GridFormingUnit
    bus_nodes: list  # (bus, phase index, node)
    loads: dict  # compiled load rows, see _load_rows
    caps: dict  # cap id -> {phase: (block, node)}
    step_blocks: dict = field(default_factory=dict)  # step id -> [block]


def _branch_ratio(model, taps):
    return PhasorSolver(model).tap_ratios(taps)


def build_full_emt(model, microgrid, h, f0=60.0, switch_states=None, taps=None, step_loads=None,
                   net=None, gfm=None):
    """Whole-feeder EMT network with the grid-forming source at the slack bus.

    Pass ``net`` and ``gfm`` to build around an existing source.
    """
    if net is None:
        net = EmtNetwork(h)
        gfm = GridFormingUnit(net, model.slack_bus_id, microgrid)
    w = TWO_PI * f0
    bus_nodes = []
    for bus_id in model.order:
        bus = model.bus_map[bus_id]
        nodes = net.nodes3(bus_id, bus.phases)
        for k in range(3):
            if nodes[k] >= 0:
                bus_nodes.append((bus_id, k, int(nodes[k])))
    ratios = _branch_ratio(model, taps)
    for br in model.branches:
        to_bus = model.bus_map[br.to_bus]
        mask = to_bus.mask
        frm = np.where(mask, net.nodes3(br.from_bus, model.bus_map[br.from_bus].phases), -1)
        to = np.where(mask, net.nodes3(br.to_bus, to_bus.phases), -1)
        z = np.where(np.outer(mask, mask), br.z, 0)
        a = ratios.get(br.id)
        net.add_rl3(br.id, frm, to, z.real, z.imag / w, tscale=None if a is None else 1.0 / np.asarray(a))
        half = br.y / 2
        if np.any(half.imag != 0):
            for end, nodes in (("f", frm), ("t", to)):
                c = np.where(np.outer(mask, mask), half.imag / w, 0)
                net.add_shunt_c3(f"{br.id}.C{end}", nodes, c)
    states = switch_states or {}
    caps = {}
    for cap in model.shunt_caps:
        bus = model.bus_map[cap.bus]
        nodes = net.nodes3(cap.bus, bus.phases)
        closed = bool(states.get(cap.id, cap.closed))
        poles = {}
        for k, p in enumerate(PHASES):
            if cap.kvar[k] > 0 and nodes[k] >= 0:
                C = cap.kvar[k] * 1e3 / (w * bus.v_base**2)
                blk = net.add_capacitor(f"{cap.id}.{p}", int(nodes[k]), -1, C, switchable=True, closed=closed)
                poles[p] = (blk, int(nodes[k]))
        caps[cap.id] = poles
    rows = []
    for ld in model.loads:
        rows += _add_load(net, model, ld, w, switchable=False)
    step_blocks = {}
    for sid, ld in (step_loads or {}).items():
        r = _add_load(net, model, ld, w, switchable=True)
        step_blocks[sid] = [b for row in r for b in (row["r_blk"], row["x_blk"]) if b >= 0]
        rows += r
    return FullEmtParts(net, gfm, bus_nodes, _load_rows(rows), caps, step_blocks)


def _add_load(net, model, ld, w, switchable):
    bus = model.bus_map[ld.bus]
    vb = bus.v_base
    out = []
    kw = {"switchable": True, "closed": False} if switchable else {}
    for k, p in enumerate(PHASES):
        if p not in ld.phases or not bus.mask[k]:
            continue
        node = net.node(f"{ld.bus}.{p}")
        P = ld.p_kw[k] * 1e3
        Q = ld.q_kvar[k] * 1e3
        r_blk = x_blk = -1
        if P > 0:
            r_blk = net.add_resistor(f"{ld.id}.{p}.R", node, -1, vb * vb / P, **kw)
        if Q > 0:
            x_blk = net.add_inductor(f"{ld.id}.{p}.L", node, -1, vb * vb / (Q * w), **kw)
        elif Q < 0:
            x_blk = net.add_capacitor(f"{ld.id}.{p}.C", node, -1, -Q / (w * vb * vb), **kw)
        if r_blk < 0 and x_blk < 0:
            continue
        out.append({"node": node, "r_inv": P / (vb * vb), "r_blk": r_blk, "x_blk": x_blk,
                    "inv_vb": 1.0 / vb, "zp": ld.zip_p, "zq": ld.zip_q})
    return out


def _load_rows(rows):
    n = len(rows)
    main = np.array([r["r_blk"] if r["r_blk"] >= 0 else r["x_blk"] for r in rows], dtype=np.int64)
    return {
        "node": np.array([r["node"] for r in rows], dtype=np.int64),
        "r_inv": np.array([r["r_inv"] for r in rows]),
        "x_blk": np.array([max(r["x_blk"], 0) for r in rows], dtype=np.int64),
        "has_x": np.array([r["x_blk"] >= 0 for r in rows]),
        "main_blk": main,
        "inv_vb": np.array([r["inv_vb"] for r in rows]),
        "zp": np.array([r["zp"] for r in rows]).reshape(n, 3).T.copy(),
        "zq": np.array([r["zq"] for r in rows]).reshape(n, 3).T.copy(),
    }


def _zip_scale(c, u):
    """zip(u)/u^2 - 1: the correction relative to the constant-impedance current."""
    az, ai, ap = c
    u2 = u * u
    p_term = np.where(u >= ZIP_CLAMP_PU, ap / np.maximum(u2, 1e-12), ap / ZIP_CLAMP_PU**2)
    return az + ai / np.maximum(u, 1e-12) + p_term - 1.0


# ------------------------------------------------------------- benchmark


class FullEmtSimulation(EmtTestbed):
    """Monolithic EMT run of the whole feeder with the same source and events."""

    testbed = "full_emt"

    def __init__(self, scenario):
        super().__init__(scenario)
        model = self.model
        self.switch_states = scenario_switch_states(scenario)
        self._step_loads = scenario.step_loads()
        self.parts = self._build()
        p0, q0 = initial_operating_point(model, PhasorSolver(model), scenario)
        self._start_engine(p0, q0)
        L = self.parts.loads
        self._iX_prev = np.zeros(len(L["node"]))
        nodes = [nd for _, _, nd in self.parts.bus_nodes]
        self.rmswin = ExtractionWindow(self.h, self.f0, len(nodes), kind="rms", track=True)
        self._win_nodes = np.array(nodes, dtype=np.int64)
        chan = {nd: j for j, nd in enumerate(nodes)}
        self._load_chan = np.array([chan[nd] for nd in L["node"]], dtype=np.int64)
        self._bus_inv_vb = np.array([1.0 / model.bus_map[b].v_base for b, _, _ in self.parts.bus_nodes])
        self._u = np.ones(len(L["node"]))
        self._load_events = []
        self._cap_events = []
        for ev in scenario.events:
            ev = _copy_event(ev)
            if ev.kind == "load_step":
                self._arm_pow(ev)
                self._load_events.append(ev)
            elif ev.kind == "cap_switch":
                self._cap_events.append(ev)
        self.phasor_names = [f"v_{b}.{PHASES[k]}" for b, k, _ in self.parts.bus_nodes]
        self.phasor_data = np.zeros((self.K, len(self.phasor_names)))

    def _build(self):
        sc = self.sc
        return build_full_emt(self.model, sc.microgrid, self.h, self.f0, self.switch_states, sc.taps,
                              self._step_loads, net=self.net, gfm=self.gfm)

    # ------------------------------------------------------- recording
    def _extra_emt_names(self):
        names = []
        self._cap_cols = []
        for cid, poles in self.parts.caps.items():
            for p in PHASES:
                names.append(f"i_cap_{cid}.{p}")
                self._cap_cols.append(poles[p][0] if p in poles else -1)
        return names

    def _extra_emt_values(self, r):
        ibr = self.engine.ibr
        j = 8
        for blk in self._cap_cols:
            r[j] = ibr[blk, 0] if blk >= 0 else 0.0
            j += 1

    # ------------------------------------------------------------- loop
    def _correction(self):
        """Nodal injections (A) that turn the R-L loads into ZIP loads."""
        eng = self.engine
        L = self.parts.loads
        if self.rmswin.ready:
            self._u = self.rmswin.rms()[self._load_chan] * L["inv_vb"]
        kp = _zip_scale(L["zp"], self._u)
        kq = _zip_scale(L["zq"], self._u)
        nd = L["node"]
        v_pred = 2.0 * eng.v[nd] - eng.v_prev[nd]
        ix = eng.ibr[L["x_blk"], 0] * L["has_x"]
        ix_pred = 2.0 * ix - self._iX_prev
        self._iX_prev = ix
        draw = (kp * L["r_inv"] * v_pred + kq * ix_pred) * eng.closed[L["main_blk"]]
        return -np.bincount(nd, draw, self.net.n_nodes)

    def _apply_events(self, t0):
        eps = 1e-12
        while self._cap_events and self._cap_events[0].time <= t0 + eps:
            ev = self._cap_events.pop(0)
            self._arm_emt_event(ev, self.parts.caps[ev.params["cap"]])
        keep = []
        for ev in self._load_events:
            if ev.fire_time is None:
                keep.append(ev)
                continue
            # same effective instant as the co-simulation: next phasor boundary plus the exchange delay
            t_eff = math.ceil(ev.fire_time / self.H - 1e-9) * self.H + self.cfg.delay
            if t_eff > t0 + eps:
                keep.append(ev)
                continue
            on = bool(ev.params.get("on", True))
            for blk in self.parts.step_blocks[ev.params["id"]]:
                self.engine.set_switch(blk, on)
            self.events_log.append((ev.fire_time, f"{ev.describe()} applied at {t0:.6g}"))
        self._load_events = keep

    def _window(self, k):
        eng = self.engine
        pll = self.pll
        win = self.rmswin
        wn = self._win_nodes
        for n in range(1, self.N + 1):
            t = (k * self.N + n) * self.h
            self._apply_events(t - self.h)
            theta = pll.state.theta
            eng.step(self._correction())
            self._gfm_update()
            pll.update(eng)
            win.push(eng.v[wn], theta)
            self._check_pow(t, theta)
            self._record_emt()
        if win.ready:
            self.phasor_data[k] = win.rms() * self._bus_inv_vb
        else:
            self.phasor_data[k] = np.nan

    def advance(self, n_windows):
        for _ in range(n_windows):
            k = self.k
            if k >= self.K:
                return
            self.pacer.begin(k)
            w0 = time.perf_counter()
            self._window(k)
            self._window_times.append(time.perf_counter() - w0)
            self.pacer.end(k)
            self.k = k + 1

    def run(self):
        w0 = time.perf_counter()
        self.advance(self.K - self.k)
        return self.record(time.perf_counter() - w0)

    def record(self, wall=0.0):
        emt = self._emt_group(self._row)
        kk = self.k
        phasor = ChannelGroup(self.H, (np.arange(kk) + 1) * self.H,
                              {name: self.phasor_data[:kk, j] for j, name in enumerate(self.phasor_names)})
        man = self._manifest(wall)
        man["nodes"] = self.net.n_nodes
        man["pending_events"] = [ev.describe() for ev in self._load_events + self._cap_events]
        return RunRecord({"emt": emt, "phasor": phasor}, man, list(self.events_log))


def _copy_event(ev):
    import copy

    out = copy.copy(ev)
    out.params = dict(ev.params)
    out.fire_time = None
    return out


# ----------------------------------------------------------------- metrics


def common_grid(ta, tb, rate):
    """Indices into ``ta`` and ``tb`` at shared sample instants (to 1e-6 of ``rate``)."""
    ka = np.round(np.asarray(ta) / rate).astype(np.int64)
    kb = np.round(np.asarray(tb) / rate).astype(np.int64)
    on_a = np.abs(ka * rate - ta) < 1e-6 * rate
    on_b = np.abs(kb * rate - tb) < 1e-6 * rate
    _, ia, ib = np.intersect1d(np.where(on_a, ka, -1 - np.arange(len(ka))),
                               np.where(on_b, kb, -2 - len(ka) - np.arange(len(kb))),
                               assume_unique=True, return_indices=True)
    return ia, ib


def rmse(a, b):
    """sqrt(mean((a - b)^2)) over equal-length samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty overlap")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def sliding_rms(x, h, f0=60.0, freq=None):
    """Trailing one-cycle RMS of a waveform.

    With ``freq`` (Hz, one value per sample) the window follows the local cycle
    length, so an off-nominal steady state carries no double-frequency ripple.
    """
    x2 = np.asarray(x, float) ** 2
    if freq is None:
        return np.sqrt(np.maximum(sliding_cycle_mean(x2, h, f0), 0.0))
    t = np.arange(len(x2)) * h
    prim = CubicSpline(t, x2).antiderivative()
    T = 1.0 / np.asarray(freq, float)
    lo = np.maximum(t - T, 0.0)
    mean = (prim(t) - prim(lo)) / np.maximum(t - lo, h)
    n0 = int(np.ceil(T[0] / h))
    mean[:n0] = mean[n0] if len(mean) > n0 else mean[:n0]  # partial first cycle
    return np.sqrt(np.maximum(mean, 0.0))


def channel_rmse(run_a, run_b, names, t0=None, t1=None, scale=1.0):
    """Per-channel RMSE on the shared instants inside [t0, t1].

    Returns {name: value, "max": worst value, "max_channel": its name}.
    """
    out = {}
    for name in names:
        ta, xa = run_a.channel(name)
        tb, xb = run_b.channel(name)
        rate = max(run_a.groups[run_a.group_of(name)].rate, run_b.groups[run_b.group_of(name)].rate)
        ia, ib = common_grid(ta, tb, rate)
        sel = np.ones(len(ia), bool)
        if t0 is not None:
            sel &= ta[ia] >= t0 - 1e-12
        if t1 is not None:
            sel &= ta[ia] <= t1 + 1e-12
        out[name] = rmse(xa[ia[sel]] / scale, xb[ib[sel]] / scale)
    worst = max(names, key=lambda n: out[n])
    out["max"] = out[worst]
    out["max_channel"] = worst
    return out


def pcc_rms_pu(run, v_base, f0=60.0):
    """One-cycle RMS of the PCC phase voltages in pu, as {phase: array}.

    The window tracks the recorded frequency when the run carries one.
    """
    out = {}
    freq = run.channel("freq")[1] if "freq" in run.groups["emt"].names else None
    for p in PHASES:
        t, v = run.channel(f"v_pcc.{p}")
        out[p] = sliding_rms(v, run.groups["emt"].rate, f0, freq) / v_base
    return t, out


def transient_rmse(run_a, run_b, v_base, t0, t1=None, f0=60.0):
    """Per-phase RMSE of the PCC RMS voltage (pu) over [t0, t1]; max phase highlighted."""
    ta, ra = pcc_rms_pu(run_a, v_base, f0)
    tb, rb = pcc_rms_pu(run_b, v_base, f0)
    ia, ib = common_grid(ta, tb, run_a.groups["emt"].rate)
    sel = ta[ia] >= t0 - 1e-12
    if t1 is not None:
        sel &= ta[ia] <= t1 + 1e-12
    out = {p: rmse(ra[p][ia[sel]], rb[p][ib[sel]]) for p in PHASES}
    worst = max(PHASES, key=lambda p: out[p])
    out["max"] = out[worst]
    out["max_phase"] = worst
    return out


def fundamental_phasor(t, x, f):
    """Least-squares fit of x ~ c + sqrt(2)|X| cos(2 pi f t + ang); returns X."""
    w = TWO_PI * f
    A = np.column_stack([np.cos(w * t), np.sin(w * t), np.ones_like(t)])
    (a, b, _), *_ = np.linalg.lstsq(A, x, rcond=None)
    return (a - 1j * b) / math.sqrt(2.0)


def pcc_power(run, n_cycles=3, f0=60.0):
    """Per-phase P (kW) and Q (kVAr) at the PCC over the trailing cycles."""
    t, _ = run.channel("v_pcc.a")
    h = run.groups["emt"].rate
    n = int(round(n_cycles / (f0 * h)))
    sl = slice(len(t) - n, len(t))
    f = float(np.mean(run.channel("freq")[1][sl]))
    s = np.zeros(3, dtype=complex)
    for k, p in enumerate(PHASES):
        V = fundamental_phasor(t[sl], run.channel(f"v_pcc.{p}")[1][sl], f)
        Ib = fundamental_phasor(t[sl], run.channel(f"i_pcc.{p}")[1][sl], f)
        s[k] = V * np.conj(Ib)
    return s.real / 1e3, s.imag / 1e3


@dataclass
class ComparisonReport:
    errors: dict  # channel -> signed error (B - A), pu
    max_error: float
    iqr: float
    max_channel: str
    p_mismatch_kw: np.ndarray
    q_mismatch_kvar: np.ndarray
    drift: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)

    def summary(self):
        lines = [
            f"steady-state nodal voltage error: max {self.max_error:.6f} pu at {self.max_channel}, "
            f"IQR {self.iqr:.6f} pu over {len(self.errors)} bus-phases",
            "PCC P mismatch (kW): " + " ".join(f"{p}={x:+.3f}" for p, x in zip(PHASES, self.p_mismatch_kw)),
            "PCC Q mismatch (kVAr): " + " ".join(f"{p}={x:+.3f}" for p, x in zip(PHASES, self.q_mismatch_kvar)),
        ]
        for label, row in self.cost.items():
            lines.append(f"cost {label}: {row['emt_step_mean_us']:.2f} us per EMT step "
                         f"(p95 {row['emt_step_p95_us']:.2f} us)")
        return "\n".join(lines)

    def rows(self):
        return [(name, err) for name, err in sorted(self.errors.items())]


def steady_state_report(run_a, run_b, n_cycles=3, drift_tol=1e-4, f0=60.0):
    """Steady-state voltage-magnitude errors between two runs over the trailing cycles."""
    ga = run_a.groups["phasor"]
    gb = run_b.groups["phasor"]
    names = [n for n in ga.names if n.startswith("v_") and n in gb.data]
    if not names:
        raise ValueError("no common voltage channels")
    T = n_cycles / f0
    drift = {}
    means = {}
    for label, g in (("A", ga), ("B", gb)):
        sel = g.time >= g.time[-1] - T + 1e-9
        for n in names:
            x = g.data[n][sel]
            if np.any(np.isnan(x)):
                raise SteadyStateError(f"run {label} channel {n} has no data in the trailing window", n)
            d = float(x.max() - x.min())
            drift[(label, n)] = d
            if d > drift_tol:
                raise SteadyStateError(
                    f"run {label} not in steady state: {n} drifts {d:.2e} pu over the last {n_cycles} cycles",
                    n, d)
            means[(label, n)] = float(x.mean())
    errors = {n: means[("B", n)] - means[("A", n)] for n in names}
    vals = np.array(list(errors.values()))
    worst = max(errors, key=lambda n: abs(errors[n]))
    q75, q25 = np.percentile(vals, [75, 25])
    pa, qa = pcc_power(run_a, n_cycles, f0)
    pb, qb = pcc_power(run_b, n_cycles, f0)
    return ComparisonReport(errors, abs(errors[worst]), float(q75 - q25), worst, pb - pa, qb - qa,
                            {f"{lab}:{n}": d for (lab, n), d in drift.items()})


def cost_report(runs):
    """Per-step wall-clock table from run manifests: {label: stats}."""
    out = {}
    for label, run in runs.items():
        m = run.manifest
        mean = m["wall_per_emt_step_mean"]
        out[label] = {
            "testbed": m.get("testbed", ""),
            "emt_step_mean_us": mean * 1e6,
            "emt_step_p95_us": m["wall_per_emt_step_p95"] * 1e6,
            "phasor_step_mean_us": mean * m["N"] * 1e6,
            "emt_steps": m["emt_steps"],
        }
    return out


def settling_time(t, x, t_event, band=0.02, floor=1e-6):
    """Time after ``t_event`` until ``x`` stays within ``band`` of its total change
    around the final value (final = mean of the last 1% of samples)."""
    t = np.asarray(t)
    x = np.asarray(x)
    i0 = int(np.searchsorted(t, t_event))
    if i0 >= len(t):
        raise ValueError("event after the end of the record")
    tail = max(1, len(t) // 100)
    final = float(x[-tail:].mean())
    pre = float(x[max(i0 - 1, 0)])
    tol = max(band * abs(final - pre), floor)
    outside = np.flatnonzero(np.abs(x[i0:] - final) > tol)
    if len(outside) == 0:
        return 0.0
    last = i0 + outside[-1]
    if last + 1 >= len(t):
        return float("inf")
    return float(t[last + 1] - t_event)


def transient_excursion(t, x, t_event, t_end=None):
    """Largest distance of ``x`` outside the band between its pre-event value and
    its final value, after ``t_event``: the part of the response that is not
    explained by a quasi-static move between the two operating points."""
    t = np.asarray(t)
    x = np.asarray(x)
    i0 = int(np.searchsorted(t, t_event))
    i1 = len(t) if t_end is None else int(np.searchsorted(t, t_end, side="right"))
    tail = max(1, (i1 - i0) // 20)
    final = float(x[i1 - tail:i1].mean())
    pre = float(x[max(i0 - 1, 0)])
    lo, hi = min(pre, final), max(pre, final)
    seg = x[i0:i1]
    return float(np.max(np.maximum(seg - hi, lo - seg).clip(min=0.0)))


def waveform_spike(t, v, t_event, f0=60.0, n_after=3):
    """Peak |v| within ``n_after`` cycles after the event relative to the larger
    of the pre-event and settled amplitudes, minus one."""
    t = np.asarray(t)
    v = np.asarray(v)
    T = 1.0 / f0
    pre = np.abs(v[(t >= t_event - T) & (t < t_event)])
    post = np.abs(v[(t > t_event) & (t <= t_event + n_after * T)])
    end = np.abs(v[t > t[-1] - T])
    if len(pre) == 0 or len(post) == 0:
        raise ValueError("record does not cover the event window")
    ref = max(pre.max(), end.max())
    return float(post.max() / ref - 1.0)


def peak_pu(t, v, v_base, t0, t1):
    """Largest instantaneous |v| in [t0, t1] as a multiple of the nominal peak."""
    sel = (np.asarray(t) >= t0) & (np.asarray(t) <= t1)
    return float(np.abs(np.asarray(v)[sel]).max() / (math.sqrt(2.0) * v_base))


def run_full_emt(scenario):
    if scenario.testbed != "full_emt":
        scenario = scenario.with_overrides(testbed="full_emt")
    return FullEmtSimulation(scenario).run()


__all__ = ["ComparisonReport", "FullEmtSimulation", "ScenarioError", "SteadyStateError", "build_full_emt",
           "channel_rmse", "cost_report", "pcc_power", "rmse", "settling_time", "sliding_rms",
           "steady_state_report", "transient_excursion", "transient_rmse", "waveform_spike"]
