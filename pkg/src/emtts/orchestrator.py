"""Dual-rate co-simulation loop.

Phasor step k covers the EMT interval [kH, (k+1)H]:

1. the EMT side advances N substeps with the boundary currents visible at kH;
2. the slack voltage phasors extracted at (k+1)H are posted;
3. phasor-side events up to (k+1)H are applied and the network is solved
   with the latest visible slack phasors;
4. the resulting slack currents are posted.

Posted values become visible D seconds later (rounded up to a phasor step).
With the default D = H an event just after kH reaches the EMT side at
(k+2)H + h, the 2H + h worst case.
"""
import copy
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .coupling import (ExtractionWindow, InterpolatedState, ReconstructionState, SecondaryPoint,
                       cycle_frequency, secondary_coupling_step)
from .emt import TWO_PI, EmtEngine, EmtNetwork, GridFormingUnit, Pll
from .feeder import PHASES, equivalent_series_impedance
from .phasor import PhasorSolver
from .phasors import PhasorSet
from .records import ChannelGroup, RunRecord
from .scenario import ScenarioError

POW_ANGLE = {"zero": 0.0, "peak": 90.0}


class SimulationError(RuntimeError):
    def __init__(self, t, cause):
        self.t = t
        self.cause = cause
        super().__init__(f"simulation failed at t={t:.6g} s: {cause}")


class MeasurementError(RuntimeError):
    pass


# ------------------------------------------------------------------ buffer


@dataclass(frozen=True)
class Bundle:
    """Immutable snapshot passed between the two contexts."""

    k: int  # phasor step index at which it was produced
    main: PhasorSet
    secondary: tuple = ()  # ((bus, PhasorSet), ...)
    warmup: bool = False


class ExchangeBuffer:
    """Timestamped slots per direction. A value produced at step k is
    visible from step k + d on, where d = ceil(D / H)."""

    def __init__(self, H, delay):
        self.H = H
        self.delay = delay
        self.d = int(math.ceil(delay / H - 1e-9))
        self.slots = {"slack": deque(maxlen=self.d + 3), "current": deque(maxlen=self.d + 3)}
        self.reads = []  # (channel, k_read, k_produced)

    def post(self, channel, k, value):
        self.slots[channel].append((k, value))

    def visible(self, channel, k_now, back=0):
        """The latest value visible at step ``k_now`` (``back`` = 1 for the one before)."""
        seen = [(k, v) for k, v in self.slots[channel] if k + self.d <= k_now]
        if len(seen) <= back:
            return None
        k, v = seen[-1 - back]
        self.reads.append((channel, k_now, k))
        return v

    def causality_ok(self):
        return all((k_read - k_prod) * self.H >= self.delay - 1e-12 for _, k_read, k_prod in self.reads)


# ------------------------------------------------------------------ pacing


class Pacer:
    """Wall-clock pacing: phasor step k starts no earlier than k*H after start."""

    def __init__(self, H, enabled=True, clock=time.perf_counter, sleep=time.sleep):
        self.H = H
        self.enabled = enabled
        self.clock = clock
        self.sleep = sleep
        self.start = None
        self.overruns = 0
        self.steps = 0

    def begin(self, k):
        if not self.enabled:
            return
        if self.start is None:
            self.start = self.clock()
        target = self.start + k * self.H
        lag = target - self.clock()
        if lag > 0:
            self.sleep(lag)

    def end(self, k):
        if not self.enabled:
            return
        self.steps += 1
        if self.clock() - self.start > (k + 1) * self.H:
            self.overruns += 1

    @property
    def overrun_ratio(self):
        return self.overruns / self.steps if self.steps else 0.0

    @property
    def realtime_capable(self):
        return self.overrun_ratio <= 0.5


def pace_real_time(sim, enabled=True):
    """Attach a real-time pacer to a simulation before ``run``."""
    sim.pacer = Pacer(sim.H, enabled)
    return sim.pacer


# ----------------------------------------------------------- POW alignment


def align_event_pow(t_sched, time, v_ref, pow_deg=0.0, f0=60.0):
    """First sample instant >= t_sched where the reference wave passes the
    requested point-on-wave angle (0 deg = positive-going zero crossing).

    ``v_ref`` is a recorded waveform sampled at ``time``; the angle is
    tracked from the wave and its derivative.
    """
    time = np.asarray(time)
    v = np.asarray(v_ref)
    if len(time) < 3:
        raise ScenarioError("reference waveform too short")
    h = time[1] - time[0]
    w = TWO_PI * f0
    dv = np.gradient(v, h)
    ang = np.arctan2(v, dv / w)  # v = A sin(a)  ->  a
    rel = np.angle(np.exp(1j * (ang - math.radians(pow_deg))))
    i0 = int(np.searchsorted(time, t_sched - 1e-12))
    for i in range(max(i0, 1), len(time)):
        if rel[i - 1] < 0.0 <= rel[i] and rel[i] - rel[i - 1] < math.pi:
            if time[i] - t_sched >= 1.0 / f0:
                break
            return float(time[i])
    raise ScenarioError(f"point-on-wave {pow_deg} deg not matched within one period after t={t_sched}")


class _PowWatch:
    """Live POW detection on the PLL angle (v_a = V cos(theta))."""

    def __init__(self, event, pow_deg):
        self.event = event
        self.target = math.radians(pow_deg)
        self.prev = None
        self.fired = None

    def check(self, t, theta):
        a = math.remainder(theta + 0.5 * math.pi - self.target, TWO_PI)
        hit = self.prev is not None and self.prev < 0.0 <= a and a - self.prev < math.pi
        self.prev = a
        if hit:
            self.fired = t
        return hit


# ----------------------------------------------------------- shared testbed


def initial_operating_point(model, solver, scenario):
    """Three-phase slack power at nominal slack voltage (W, var)."""
    vs = PhasorSet.balanced(model.slack.v_base, 0.0)
    sol = solver.solve(vs, switch_states=scenario_switch_states(scenario), taps=scenario.taps)
    s = sol.s_slack.sum()
    return s.real, s.imag


def scenario_switch_states(scenario):
    out = {c.id: c.closed for c in scenario.feeder.shunt_caps}
    out.update(scenario.switch_states)
    return out


class EmtTestbed:
    """Parts shared by the co-simulation EMT side and the full-EMT benchmark:
    grid-forming unit at the feeder head, PCC PLL, event handling, recording."""

    testbed = "base"

    def __init__(self, scenario):
        self.sc = scenario
        cfg = scenario.coupling
        self.cfg = cfg
        self.h = cfg.h
        self.H = cfg.H
        self.N = cfg.N
        self.f0 = cfg.f0
        self.model = scenario.feeder
        self.K = int(round(scenario.duration / self.H))
        if self.K < 1:
            raise ScenarioError("duration shorter than one phasor step")
        self.net = EmtNetwork(self.h)
        self.slack_id = self.model.slack_bus_id
        self.gfm = GridFormingUnit(self.net, self.slack_id, scenario.microgrid)
        self.pcc = self.gfm.nodes
        self.k = 0
        self.pacer = Pacer(self.H, scenario.pacing == "realtime")
        self.step_hook = None
        self.ems_hook = None
        self.events_log = []
        self._emt_rows = []
        self._window_times = []
        self._powwatch = []

    # built by subclasses after all elements are added
    def _start_engine(self, p0, q0):
        self.engine = EmtEngine(self.net, self.f0)
        g = self.gfm
        c = g.cfg
        st = g.state
        p_pu = p0 / c.s_base
        q_pu = q0 / c.s_base
        st.f = c.f0 - c.kp_hz * p_pu
        st.e = c.v_set_pu - c.kq * q_pu
        st.pm = p_pu
        g.start(self.engine)
        self.pll = Pll(self.pcc, self.sc.pll)
        self.pll.state.omega = TWO_PI * st.f
        self.pll.state.integ = self.pll.state.omega - TWO_PI * self.pll.cfg.f0
        self.release_step = int(round(self.sc.release / self.h))
        self._phi = 0.0  # unwrapped PLL angle, turned into the freq channel after the run
        self._th_prev = self.pll.state.theta
        self._setup_recording()

    def _gfm_update(self):
        eng = self.engine
        if eng.k <= self.release_step:
            st = self.gfm.state
            st.theta = math.remainder(st.theta + TWO_PI * st.f * self.h, TWO_PI)
            self.gfm._set_emf(eng)
        else:
            self.gfm.update(eng)

    # -------------------------------------------------------- recording
    def _wave_specs(self):
        specs = []
        for item in self.sc.record:
            if item.startswith("wave:"):
                bus = item[5:]
                for p in PHASES:
                    name = f"{bus}.{p}"
                    if self.net.has_node(name):
                        specs.append((f"w_{name}", self.net.node(name)))
        return specs

    def _setup_recording(self):
        n_steps = self.K * self.N
        self._waves = self._wave_specs()
        base = [f"v_pcc.{p}" for p in PHASES] + [f"i_pcc.{p}" for p in PHASES] + ["freq", "f_cmd"]
        self.emt_names = base + self._extra_emt_names() + [n for n, _ in self._waves]
        self.emt_data = np.zeros((n_steps, len(self.emt_names)))
        self._wave_nodes = np.array([ix for _, ix in self._waves], dtype=np.int64)
        self._row = 0

    def _extra_emt_names(self):
        return []

    def _extra_emt_values(self, row):
        pass

    def _record_emt(self):
        eng = self.engine
        r = self.emt_data[self._row]
        v = eng.v
        p = self.pcc
        ib = eng.ibr[self.gfm.block]
        r[0] = v[p[0]]
        r[1] = v[p[1]]
        r[2] = v[p[2]]
        r[3] = -ib[0]
        r[4] = -ib[1]
        r[5] = -ib[2]
        th = self.pll.state.theta
        self._phi += math.remainder(th - self._th_prev, TWO_PI)
        self._th_prev = th
        r[6] = self._phi
        r[7] = self.gfm.state.f
        self._extra_emt_values(r)
        if len(self._wave_nodes):
            r[-len(self._wave_nodes):] = v[self._wave_nodes]
        self._row += 1

    def _emt_group(self, n):
        data = {name: self.emt_data[:n, j].copy() for j, name in enumerate(self.emt_names)}
        t = (np.arange(n) + 1) * self.h
        # one-turn average removes the double-frequency ripple that unbalance puts on the PLL
        data["freq"] = cycle_frequency(t, data["freq"])
        return ChannelGroup(self.h, t, data)

    # ------------------------------------------------------------ POW
    def _arm_pow(self, ev):
        if ev.pow == "immediate":
            ev.fire_time = ev.time
            return
        deg = POW_ANGLE.get(ev.pow, ev.pow)
        self._powwatch.append(_PowWatch(ev, float(deg)))
        ev.fire_time = None

    def _check_pow(self, t, theta):
        if not self._powwatch:
            return
        keep = []
        for w in self._powwatch:
            if t < w.event.time - 1e-12:
                keep.append(w)
                continue
            if w.check(t, theta):
                w.event.fire_time = t
            elif t > w.event.time + 1.0 / self.f0:
                raise ScenarioError(f"point-on-wave target for {w.event.describe()} not matched within one period")
            else:
                keep.append(w)
        self._powwatch = keep

    # ------------------------------------------------------------ EMT events
    def _arm_emt_event(self, ev, blocks_by_phase):
        """Arm per-pole closing/opening of EMT-side switchable blocks."""
        closed = bool(ev.params.get("closed", True))
        mode = ev.pow if ev.pow in ("peak", "zero", "immediate") else "immediate"
        for ph, (blk, node) in blocks_by_phase.items():
            if not closed or mode == "immediate":
                self.engine.set_switch(blk, closed)
            else:
                self.engine.switch_at_pow(blk, mode, node)
        self.events_log.append((self.engine.t, f"{ev.describe()} armed ({mode})"))

    def _manifest(self, wall):
        steps = self.K * self.N
        wt = np.array(self._window_times) / self.N if self._window_times else np.zeros(1)
        return {
            "artifact_version": __version__,
            "testbed": self.testbed,
            "scenario": self.sc.name,
            "scenario_hash": self.sc.source_hash,
            "feeder": self.sc.feeder_ref,
            "v_base": self.model.slack.v_base,
            "f0": self.cfg.f0,
            "h": self.h, "H": self.H, "N": self.N, "delay": self.cfg.delay,
            "mode": self.cfg.mode, "feedforward": self.cfg.feedforward,
            "device": self.sc.microgrid.kind,
            "emt_steps": steps,
            "wall_s": wall,
            "wall_per_emt_step_mean": wall / steps,
            "wall_per_emt_step_p95": float(np.percentile(wt, 95)),
            "overruns": self.pacer.overruns,
            "overrun_ratio": self.pacer.overrun_ratio,
            "realtime_capable": self.pacer.realtime_capable,
            "pacing": self.sc.pacing,
            "switch_log": [[t, n, c] for t, n, c in self.engine.switch_log],
        }


# ----------------------------------------------------------- co-simulation


class CoSimulation(EmtTestbed):
    """EMT microgrid + phasor feeder coupled at the slack bus."""

    testbed = "cosim"

    def __init__(self, scenario, dual_context=False):
        super().__init__(scenario)
        self.dual_context = dual_context
        model = self.model
        self.solver = PhasorSolver(model)
        self.mode = self.cfg.mode
        self.net.add_current_source("boundary", self.pcc)
        self.switch_states = scenario_switch_states(scenario)
        self.extra = {}
        self._extra_compiled = None
        # secondary coupling points: caps moved to the EMT side
        self.sec = []
        for cap_id in scenario.secondary:
            cap = next(c for c in model.shunt_caps if c.id == cap_id)
            self.sec.append(self._add_secondary(cap))
            self.switch_states[cap_id] = False
        p0, q0 = initial_operating_point(model, self.solver, scenario)
        self._start_engine(p0, q0)
        self.buf = ExchangeBuffer(self.H, self.cfg.delay)
        self.win = ExtractionWindow(self.h, self.f0, 3, track=True)
        self.recon = ReconstructionState(self.h, self.cfg.feedforward, self.cfg.ff_mode, self.f0)
        self.interp = InterpolatedState()
        self._cur = [0.0, 0.0, 0.0]
        self._last_bundle = None
        self.nominal = PhasorSet.balanced(model.slack.v_base, 0.0)
        self._phasor_events = []
        self._mode_events = []
        self._emt_events = []
        for ev in scenario.events:
            ev = copy.copy(ev)
            ev.fire_time = None
            if ev.kind == "coupling_mode":
                self._mode_events.append(ev)
            elif ev.kind == "cap_switch" and ev.params["cap"] in scenario.secondary:
                self._emt_events.append(ev)
            else:
                self._phasor_events.append(ev)
                self._arm_pow(ev)
        self._setup_phasor_recording()
        self.solve_count = 0
        self.steps_between_solves = []
        self._steps_since_solve = 0
        self._pool = None

    # ------------------------------------------------------- secondary
    def _add_secondary(self, cap):
        bus = self.model.bus_map[cap.bus]
        z = equivalent_series_impedance(self.model, cap.bus)
        term = self.net.nodes3(cap.bus, bus.phases)
        mask = term >= 0
        zm = np.where(np.outer(mask, mask), z, 0)
        # Thevenin source: EMF behind the head-to-bus series impedance
        blk_src = self.net.add_rl3(f"sec_src_{cap.id}", term, [-1, -1, -1], zm.real, zm.imag / (TWO_PI * self.f0))
        poles = {}
        vb = bus.v_base
        for k, p in enumerate(PHASES):
            if cap.kvar[k] > 0:
                C = cap.kvar[k] * 1e3 / (TWO_PI * self.f0 * vb * vb)
                blk = self.net.add_capacitor(f"{cap.id}.{p}", int(term[k]), -1, C,
                                             switchable=True, closed=bool(self.switch_states.get(cap.id, cap.closed)))
                poles[p] = (blk, int(term[k]))
        point = SecondaryPoint(cap.bus, zm)
        return {"cap": cap, "point": point, "src_block": blk_src, "poles": poles,
                "term": term, "recon": ReconstructionState(self.h, self.cfg.feedforward, self.cfg.ff_mode, self.f0),
                "win": ExtractionWindow(self.h, self.f0, 3, track=True), "emf": None}

    def _cap_current(self, s):
        i = [0.0, 0.0, 0.0]
        for k, p in enumerate(PHASES):
            if p in s["poles"]:
                i[k] = self.engine.ibr[s["poles"][p][0], 0]
        return i

    # ------------------------------------------------------- recording
    def _extra_emt_names(self):
        names = [f"i_bnd.{p}" for p in PHASES]
        for s in self.sec:
            names += [f"i_sec_{s['cap'].id}.{p}" for p in PHASES]
        return names

    def _extra_emt_values(self, r):
        r[8] = self._cur[0]
        r[9] = self._cur[1]
        r[10] = self._cur[2]
        j = 11
        for s in self.sec:
            i = self._cap_current(s)
            r[j:j + 3] = i
            j += 3

    def _setup_phasor_recording(self):
        names = []
        self._vcols = []
        for bus_id in self.model.order:
            bus = self.model.bus_map[bus_id]
            for k, p in enumerate(PHASES):
                if bus.mask[k]:
                    names.append(f"v_{bus_id}.{p}")
                    self._vcols.append((bus_id, k))
        names += [f"islack_mag.{p}" for p in PHASES] + [f"islack_ang.{p}" for p in PHASES]
        names += [f"p_slack.{p}" for p in PHASES] + [f"q_slack.{p}" for p in PHASES]
        names += ["iterations"]
        self.phasor_names = names
        self.phasor_data = np.zeros((self.K, len(names)))
        slack = self.model.slack_bus_id
        self._vnode = np.array([-1 - ph if b == slack else self.solver.idx[b][ph] for b, ph in self._vcols], dtype=int)

    def _record_phasor(self, k1, sol):
        r = self.phasor_data[k1 - 1]
        j = len(self._vcols)
        r[:j] = sol.node_pu(self._vnode)
        i = sol.i_slack
        r[j:j + 3] = np.abs(i)
        r[j + 3:j + 6] = np.angle(i)
        r[j + 6:j + 9] = sol.s_slack.real / 1e3
        r[j + 9:j + 12] = sol.s_slack.imag / 1e3
        r[j + 12] = sol.iterations

    # ------------------------------------------------------- main loop
    def _apply_mode_events(self, k):
        t = k * self.H
        while self._mode_events and self._mode_events[0].time <= t + 1e-12:
            ev = self._mode_events.pop(0)
            new = ev.params["mode"]
            if new != self.mode:
                self.mode = new
                self._last_bundle = None  # re-seed the generator for the new scheme
            self.events_log.append((t, ev.describe()))

    def _boundary_inputs(self, k):
        """Select the boundary current generator for window k."""
        latest = self.buf.visible("current", k)
        if latest is None or latest.warmup:
            return False
        if latest is not self._last_bundle:
            if self.mode == "direct":
                self.recon.update(latest.main)
            else:
                prev = self.buf.visible("current", k, back=1)
                if prev is None or prev.warmup:
                    # ramp up from zero: an unfiltered current step into the inductive
                    # source branch leaves an undamped trapezoidal Nyquist oscillation
                    self.interp.set_window(PhasorSet(np.zeros(3), latest.main.ang), latest.main)
                else:
                    self.interp.set_window(prev.main, latest.main)
            for s in self.sec:
                emf = dict(latest.secondary).get(s["cap"].bus)
                if emf is not None:
                    s["recon"].update(emf)
            self._last_bundle = latest
        elif self.mode == "interpolated":
            # no new data: hold the last value
            self.interp.set_window(latest.main, latest.main)
        return True

    def _emt_window(self, k):
        eng = self.engine
        N = self.N
        active = self._boundary_inputs(k)
        direct = self.mode == "direct"
        pll = self.pll
        win = self.win
        pcc = self.pcc
        cur = self._cur
        for n in range(1, N + 1):
            t = (k * N + n) * self.h
            while self._emt_events and self._emt_events[0].time <= t - self.h + 1e-12:
                ev = self._emt_events.pop(0)
                s = next(s for s in self.sec if s["cap"].id == ev.params["cap"])
                self._arm_emt_event(ev, s["poles"])
            theta = pll.state.theta
            omega = pll.state.omega
            if active:
                if direct:
                    y = self.recon.step(theta, omega)
                    cur[0], cur[1], cur[2] = y
                else:
                    cur[0], cur[1], cur[2] = self.interp.step(n / N, theta)
            eng.set_current("boundary", cur)
            for s in self.sec:
                if s["recon"].received:
                    eng.emf[s["src_block"]] = s["recon"].step(theta, omega)
            eng.step()
            self._gfm_update()
            pll.update(eng)
            v = eng.v
            win.push((v[pcc[0]], v[pcc[1]], v[pcc[2]]), theta)
            for s in self.sec:
                s["win"].push(self._cap_current(s), theta)
            self._check_pow(t, theta)
            self._record_emt()
        self._steps_since_solve += N

    def _apply_phasor_events(self, k1):
        """Apply phasor-side events whose (POW-resolved) time is <= t_{k+1}."""
        t1 = k1 * self.H
        changed = False
        while self._phasor_events:
            ev = self._phasor_events[0]
            if ev.fire_time is None or ev.fire_time > t1 + 1e-12:
                break
            self._phasor_events.pop(0)
            if ev.kind == "load_step":
                if ev.params.get("on", True):
                    self.extra[ev.params["id"]] = self._step_loads[ev.params["id"]]
                else:
                    self.extra.pop(ev.params["id"], None)
                changed = True
            elif ev.kind == "cap_switch":
                self.switch_states[ev.params["cap"]] = bool(ev.params.get("closed", True))
            self.events_log.append((ev.fire_time, f"{ev.describe()} applied at {t1:.6g}"))
        if changed:
            self._extra_compiled = self.solver.extra_loads(list(self.extra.values())) if self.extra else None

    def _pending_pow_before(self, k1):
        t1 = k1 * self.H
        return any(ev.fire_time is None and ev.time <= t1 + 1e-12 for ev in self._phasor_events)

    def _solve(self, k1):
        """Phasor solve at boundary k1 using the slack visible there."""
        vis = self.buf.visible("slack", k1)
        warm = vis is None or vis.warmup
        slack = self.nominal if warm else vis.main
        self.solver.clear_injections()
        sec_i = {} if warm else dict(vis.secondary)
        for s in self.sec:
            i = sec_i.get(s["cap"].bus)
            if i is not None:
                self.solver.inject_current(s["cap"].bus, i)
        sol = self.solver.solve(slack, switch_states=self.switch_states, taps=self.sc.taps,
                                extra_loads=self._extra_compiled)
        secondary = []
        for s in self.sec:
            i = sec_i.get(s["cap"].bus, PhasorSet.zeros())
            emf, _ = secondary_coupling_step(s["point"], PhasorSet.from_complex(sol.node_voltage(s["cap"].bus)), i)
            secondary.append((s["cap"].bus, emf))
        return sol, Bundle(k1, sol.slack_current, tuple(secondary), warmup=warm)

    def _post_slack(self, k1):
        ph = self.win.extract()
        if ph is None:
            self.buf.post("slack", k1, Bundle(k1, self.nominal, (), warmup=True))
            return
        sec = []
        for s in self.sec:
            i = s["win"].extract()
            sec.append((s["cap"].bus, i if i is not None else PhasorSet.zeros()))
        self.buf.post("slack", k1, Bundle(k1, ph, tuple(sec)))

    def advance(self, n_windows):
        """Run ``n_windows`` phasor steps."""
        if not hasattr(self, "_step_loads"):
            self._step_loads = self.sc.step_loads()
        for _ in range(n_windows):
            k = self.k
            if k >= self.K:
                return
            k1 = k + 1
            try:
                self.pacer.begin(k)
                w0 = time.perf_counter()
                self._apply_mode_events(k)
                future = None
                if self.dual_context and self.buf.d >= 1 and not self._pending_pow_before(k1):
                    self._apply_phasor_events(k1)
                    future = self._executor().submit(self._solve, k1)
                self._emt_window(k)
                self._post_slack(k1)
                if future is not None:
                    sol, bundle = future.result()
                else:
                    self._apply_phasor_events(k1)
                    sol, bundle = self._solve(k1)
                self.steps_between_solves.append(self._steps_since_solve)
                self._steps_since_solve = 0
                self.solve_count += 1
                self.buf.post("current", k1, bundle)
                self._record_phasor(k1, sol)
                if self.ems_hook is not None:
                    self.ems_hook(k1 * self.H, sol)
                if self.step_hook is not None:
                    self.step_hook(k)
                self._window_times.append(time.perf_counter() - w0)
                self.pacer.end(k)
            except ScenarioError:
                raise
            except Exception as e:  # noqa: BLE001 - attach simulation time to any module error
                raise SimulationError(self.engine.t, e) from e
            self.k = k1

    def _executor(self):
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="phasor")
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __deepcopy__(self, memo):
        pool = self._pool
        self._pool = None
        try:
            cls = self.__class__
            new = cls.__new__(cls)
            memo[id(self)] = new
            for key, val in self.__dict__.items():
                setattr(new, key, copy.deepcopy(val, memo))
        finally:
            self._pool = pool
        return new

    def run(self):
        w0 = time.perf_counter()
        try:
            self.advance(self.K - self.k)
        finally:
            self.close()
        return self.record(time.perf_counter() - w0)

    def record(self, wall=0.0):
        n = self._row
        emt = self._emt_group(n)
        kk = self.k
        ph_t = (np.arange(kk) + 1) * self.H
        phasor = ChannelGroup(self.H, ph_t, {name: self.phasor_data[:kk, j] for j, name in enumerate(self.phasor_names)})
        man = self._manifest(wall)
        man.update({
            "solves": self.solve_count,
            "rate_integrity": all(s == self.N for s in self.steps_between_solves),
            "causality_ok": self.buf.causality_ok(),
            "dual_context": self.dual_context,
            "secondary": list(self.sc.secondary),
        })
        return RunRecord({"emt": emt, "phasor": phasor}, man, list(self.events_log))


def run(scenario, dual_context=False, **kw):
    """Run a scenario on its configured testbed and return the RunRecord."""
    if scenario.testbed == "full_emt":
        from .bench import FullEmtSimulation

        sim = FullEmtSimulation(scenario, **kw)
    else:
        sim = CoSimulation(scenario, dual_context=dual_context)
    return sim.run()


# ------------------------------------------------------------ delay probe


def stratified_offsets(H, h, n_trials=None, seed=0):
    """Event offsets inside (0, H], one per h-wide stratum, randomized within it."""
    rng = np.random.default_rng(seed)
    N = int(round(H / h))
    strata = np.arange(N) if n_trials is None else np.linspace(0, N - 1, n_trials).round().astype(int)
    u = rng.uniform(0.0, 1.0, len(strata))
    return (strata + np.maximum(u, 1e-6)) * h


def measure_propagation_delay(scenario, probe=None, offsets=None, warm=None, seed=0, threshold=1e-9,
                              n_trials=None):
    """Time from a phasor-side probe event to the first EMT-side deviation of
    the boundary current, for each probe offset within a phasor step.

    Returns (delays, offsets) in seconds. The run is warmed up once and
    snapshotted; every trial continues from the same snapshot alongside an
    unperturbed baseline.
    """
    from .scenario import Event, step_load

    cfg = scenario.coupling
    H, h = cfg.H, cfg.h
    if probe is None:
        probe = {"id": "probe", "bus": scenario.feeder.slack_bus_id, "p_kw": [100.0, 100.0, 100.0],
                 "q_kvar": [50.0, 50.0, 50.0], "zip": [0.0, 0.0, 1.0]}
    if warm is None:
        warm = max(scenario.release + 0.02, 3.0 / cfg.f0 + 4 * H)
    k_warm = int(math.ceil(warm / H))
    horizon = int(math.ceil((2 * H + cfg.delay + 3 * h) / H)) + 2
    sc = scenario.with_overrides(events=[], duration=(k_warm + horizon + 1) * H, pacing="free")
    base = CoSimulation(sc)
    base._step_loads = {probe["id"]: step_load(probe)}
    base.advance(k_warm)
    snap = copy.deepcopy(base)
    base.advance(horizon)
    ref = base.emt_data[: base._row, 8:11]
    start_row = k_warm * cfg.N
    if offsets is None:
        offsets = stratified_offsets(H, h, n_trials, seed)
    amp = np.abs(ref[start_row:]).max()
    delays = []
    for off in offsets:
        t_e = k_warm * H + float(off)
        sim = copy.deepcopy(snap)
        ev = Event(t_e, "load_step", dict(probe), "immediate")
        ev.fire_time = t_e
        sim._phasor_events = [ev]
        sim.advance(horizon)
        got = sim.emt_data[: sim._row, 8:11]
        diff = np.abs(got[start_row:] - ref[start_row:]).max(axis=1)
        hit = np.flatnonzero(diff > threshold * max(amp, 1.0))
        if len(hit) == 0:
            raise MeasurementError(f"no EMT-side deviation detected for probe at t={t_e:.6g} s")
        t_dev = (start_row + hit[0] + 1) * h
        delays.append(t_dev - t_e)
    return np.array(delays), np.asarray(offsets)
