"""Fixed-step EMT solver with trapezoidal companion models.

Every element is stored as a three-port block. With port voltage
``vp = v[frm] - tscale * v[to] - emf`` the trapezoidal rule gives

    i    = G @ vp + hist
    hist = P @ vp + Q @ i        (history for the next step)

so resistors, inductors, coupled RL branches, capacitor banks and
Thevenin sources all share one kernel. Single-phase elements leave the
unused ports on ground with zero conductance.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor

from . import kernels

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)
PHASE_SHIFT = np.array([0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0])


class EmtError(RuntimeError):
    pass


class SingularNetworkError(EmtError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"floating subnetwork, no path to ground from nodes: {', '.join(self.nodes)}")


class NumericalError(EmtError):
    def __init__(self, t, node):
        self.t = t
        self.node = node
        super().__init__(f"non-finite voltage at t={t:.6g} s, node {node}")


class SwitchTimeout(EmtError):
    pass


@dataclass
class Block:
    name: str
    frm: np.ndarray
    to: np.ndarray
    G: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    tscale: np.ndarray
    switchable: bool = False
    closed: bool = True
    kind: str = ""


def _pad3(nodes):
    out = np.full(3, -1, dtype=np.int64)
    nodes = list(nodes)
    out[: len(nodes)] = nodes
    return out


class EmtNetwork:
    """Topology and element parameters. Node index -1 is ground."""

    def __init__(self, h):
        if not h > 0:
            raise ValueError("timestep h must be positive")
        self.h = float(h)
        self.node_names = []
        self._node_ix = {}
        self.blocks = []
        self._block_ix = {}
        self.current_sources = {}  # name -> node[3]

    # ------------------------------------------------------------ nodes
    def node(self, name):
        if name not in self._node_ix:
            self._node_ix[name] = len(self.node_names)
            self.node_names.append(name)
        return self._node_ix[name]

    def nodes3(self, bus, phases="abc"):
        """Node indices for a three-phase bus, -1 on absent phases."""
        return np.array([self.node(f"{bus}.{p}") if p in phases else -1 for p in "abc"], dtype=np.int64)

    def has_node(self, name):
        return name in self._node_ix

    @property
    def n_nodes(self):
        return len(self.node_names)

    def block_index(self, name):
        return self._block_ix[name]

    # ---------------------------------------------------------- elements
    def add_block(self, name, frm, to, G, P, Q, tscale=None, switchable=False, closed=True, kind=""):
        if name in self._block_ix:
            raise ValueError(f"duplicate element {name!r}")
        frm = _pad3(frm)
        to = _pad3(to)
        n = self.n_nodes
        for ix in np.concatenate([frm, to]):
            if ix < -1 or ix >= n:
                raise ValueError(f"element {name!r} references unknown node {ix}")
        blk = Block(name, frm, to, np.asarray(G, float), np.asarray(P, float), np.asarray(Q, float),
                    np.ones(3) if tscale is None else np.asarray(tscale, float), switchable, closed, kind)
        self._block_ix[name] = len(self.blocks)
        self.blocks.append(blk)
        return self._block_ix[name]

    def _scalar(self, name, a, b, g, p, q, **kw):
        G = np.zeros((3, 3))
        P = np.zeros((3, 3))
        Q = np.zeros((3, 3))
        G[0, 0], P[0, 0], Q[0, 0] = g, p, q
        return self.add_block(name, [a], [b], G, P, Q, **kw)

    def add_resistor(self, name, a, b, R, **kw):
        if R <= 0:
            raise ValueError(f"{name}: resistance must be positive")
        return self._scalar(name, a, b, 1.0 / R, 0.0, 0.0, kind="R", **kw)

    def add_inductor(self, name, a, b, L, R=0.0, **kw):
        if L <= 0:
            raise ValueError(f"{name}: inductance must be positive")
        k = 2.0 * L / self.h
        g = 1.0 / (R + k)
        return self._scalar(name, a, b, g, g, g * (k - R), kind="L", **kw)

    def add_capacitor(self, name, a, b, C, **kw):
        if C <= 0:
            raise ValueError(f"{name}: capacitance must be positive")
        g = 2.0 * C / self.h
        return self._scalar(name, a, b, g, -g, -1.0, kind="C", **kw)

    def add_rl3(self, name, frm3, to3, R, L, tscale=None, **kw):
        """Coupled series R-L between two three-phase node sets (3x3 matrices)."""
        R = np.asarray(R, float)
        L = np.asarray(L, float)
        frm3 = np.asarray(frm3)
        used = frm3 >= 0
        K = 2.0 * L / self.h
        Z = R + K
        G = np.zeros((3, 3))
        sel = np.ix_(used, used)
        G[sel] = np.linalg.inv(Z[sel])
        Q = np.zeros((3, 3))
        Q[sel] = G[sel] @ (K - R)[sel]
        return self.add_block(name, frm3, to3, G, G.copy(), Q, tscale=tscale, kind="RL", **kw)

    def add_shunt_c3(self, name, nodes3, C, **kw):
        """Coupled capacitance matrix from a node set to ground."""
        C = np.asarray(C, float)
        nodes3 = np.asarray(nodes3)
        used = nodes3 >= 0
        G = np.zeros((3, 3))
        sel = np.ix_(used, used)
        G[sel] = 2.0 * C[sel] / self.h
        Q = -np.diag(used.astype(float))
        return self.add_block(name, nodes3, [-1, -1, -1], G, -G, Q, kind="C", **kw)

    def add_source(self, name, nodes3, R, L):
        """Wye-grounded EMF behind series R-L; the EMF is set per step on the engine."""
        Rm = np.eye(3) * R
        Lm = np.eye(3) * L
        if L > 0:
            return self.add_rl3(name, nodes3, [-1, -1, -1], Rm, Lm)
        G = np.diag(np.where(np.asarray(nodes3) >= 0, 1.0 / R, 0.0))
        return self.add_block(name, nodes3, [-1, -1, -1], G, np.zeros((3, 3)), np.zeros((3, 3)), kind="R")

    def add_current_source(self, name, nodes3):
        """Register a three-phase current source drawing current out of ``nodes3``."""
        self.current_sources[name] = np.asarray(nodes3, dtype=np.int64)
        return name


def _union_find_floating(net, closed):
    parent = list(range(net.n_nodes + 1))
    ground = net.n_nodes

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for blk, on in zip(net.blocks, closed):
        if not on:
            continue
        for k in range(3):
            if not np.any(blk.G[k]):
                continue
            a = blk.frm[k] if blk.frm[k] >= 0 else ground
            b = blk.to[k] if blk.to[k] >= 0 else ground
            union(a, b)
            # coupled ports tie the frm nodes together as well
            for m in range(3):
                if m != k and blk.G[k, m] != 0 and blk.frm[m] >= 0:
                    union(a, blk.frm[m])
    g = find(ground)
    return [net.node_names[i] for i in range(net.n_nodes) if find(i) != g]


def build_companion(net, closed=None):
    """Assemble the nodal conductance matrix from the block companions.

    ``closed`` masks switchable blocks (default: their configured state).
    Raises SingularNetworkError naming nodes without a conductive path to ground.
    """
    nb = len(net.blocks)
    if closed is None:
        closed = np.array([b.closed for b in net.blocks], dtype=bool)
    n = net.n_nodes
    floating = _union_find_floating(net, closed)
    if floating:
        raise SingularNetworkError(floating)
    Y = np.zeros((n + 1, n + 1))
    if nb:
        frm = np.stack([b.frm for b in net.blocks])
        to = np.stack([b.to for b in net.blocks])
        ts = np.stack([b.tscale for b in net.blocks])
        G = np.stack([b.G for b in net.blocks]) * closed[:, None, None]
        fi = np.where(frm < 0, n, frm)
        ti = np.where(to < 0, n, to)
        for k in range(3):
            for m in range(3):
                g = G[:, k, m]
                np.add.at(Y, (fi[:, k], fi[:, m]), g)
                np.add.at(Y, (fi[:, k], ti[:, m]), -g * ts[:, m])
                np.add.at(Y, (ti[:, k], fi[:, m]), -g * ts[:, k])
                np.add.at(Y, (ti[:, k], ti[:, m]), g * ts[:, k] * ts[:, m])
    return Y[:n, :n]


@dataclass
class EmtState:
    t: float
    k: int
    v: np.ndarray
    hist: np.ndarray
    ibr: np.ndarray
    closed: np.ndarray


@dataclass
class _Trigger:
    block: int
    ref: int
    mode: str
    armed_at: float
    deadline: float
    fired: float = None


class EmtEngine:
    """Mutable simulation state for an EmtNetwork plus the per-step driver."""

    def __init__(self, net, f0=60.0, check_residual=False):
        self.net = net
        self.h = net.h
        self.f0 = f0
        self.check_residual = check_residual
        nb = len(net.blocks)
        n = net.n_nodes
        self.frm = np.ascontiguousarray(np.stack([b.frm for b in net.blocks]) if nb else np.zeros((0, 3), np.int64))
        self.to = np.ascontiguousarray(np.stack([b.to for b in net.blocks]) if nb else np.zeros((0, 3), np.int64))
        self.tscale = np.ascontiguousarray(np.stack([b.tscale for b in net.blocks]) if nb else np.zeros((0, 3)))
        self._G0 = np.stack([b.G for b in net.blocks]) if nb else np.zeros((0, 3, 3))
        self._P0 = np.stack([b.P for b in net.blocks]) if nb else np.zeros((0, 3, 3))
        self._Q0 = np.stack([b.Q for b in net.blocks]) if nb else np.zeros((0, 3, 3))
        self.closed = np.array([b.closed for b in net.blocks], dtype=bool)
        self.hist = np.zeros((nb, 3))
        self.ibr = np.zeros((nb, 3))
        self.emf = np.zeros((nb, 3))
        self.inj = np.zeros(n)
        self.v = np.zeros(n)
        self.v_prev = np.zeros(n)
        self.v_prev2 = np.zeros(n)
        self.t = 0.0
        self.k = 0
        self._isrc = {name: nodes for name, nodes in net.current_sources.items()}
        self._isrc_val = {name: np.zeros(3) for name in net.current_sources}
        self._ring_len = max(1, int(round(1.0 / (f0 * self.h))))
        self._vring = np.zeros((self._ring_len, n))
        self.triggers = []
        self.switch_log = []
        self.max_residual = 0.0
        self._dirty = True
        self._factor()

    # ------------------------------------------------------------ matrix
    def _factor(self):
        Y = build_companion(self.net, self.closed)
        mask = self.closed[:, None, None]
        self.G = np.ascontiguousarray(self._G0 * mask)
        self.P = np.ascontiguousarray(self._P0 * mask)
        self.Q = np.ascontiguousarray(self._Q0 * mask)
        self.Y = Y
        if Y.shape[0]:
            lu, piv = lu_factor(Y, check_finite=False)
            if np.any(np.abs(np.diag(lu)) < 1e-14 * max(1.0, np.abs(Y).max())):
                raise SingularNetworkError([self.net.node_names[int(np.argmin(np.abs(np.diag(lu))))]])
            self.lu = np.ascontiguousarray(lu)
            self.piv = np.ascontiguousarray(piv, dtype=np.intc)
        else:
            self.lu = np.zeros((0, 0))
            self.piv = np.zeros(0, dtype=np.intc)
        self._dirty = False

    def set_switch(self, block, closed):
        if isinstance(block, str):
            block = self.net.block_index(block)
        if not self.net.blocks[block].switchable:
            raise EmtError(f"element {self.net.blocks[block].name!r} is not switchable")
        if self.closed[block] == closed:
            return
        self.closed[block] = closed
        self.hist[block] = 0.0
        self.ibr[block] = 0.0
        self._dirty = True
        self.switch_log.append((self.t, self.net.blocks[block].name, bool(closed)))

    # ------------------------------------------------------------ inputs
    def set_emf(self, block, values):
        self.emf[block] = values

    def set_current(self, name, values):
        """Current drawn out of the source's nodes (load convention), A per phase."""
        self._isrc_val[name] = values

    # -------------------------------------------------------------- step
    def _assemble_inj(self):
        inj = self.inj
        inj[:] = 0.0
        for name, nodes in self._isrc.items():
            val = self._isrc_val[name]
            for k in range(3):
                if nodes[k] >= 0:
                    inj[nodes[k]] -= val[k]
        return inj

    def _rhs(self):
        n = self.net.n_nodes
        src = np.einsum("bij,bj->bi", self.G, self.emf) - self.hist
        acc = np.zeros(n + 1)
        np.add.at(acc, self.frm.ravel(), src.ravel())
        np.add.at(acc, self.to.ravel(), -(self.tscale * src).ravel())
        return self.inj + acc[:n]

    def step(self, extra_inj=None):
        """Advance one step to t + h. ``extra_inj`` adds nodal current injections (A)."""
        if self._dirty:
            self._factor()
        self._assemble_inj()
        if extra_inj is not None:
            self.inj += extra_inj
        spare = self.v_prev2
        self.v_prev2, self.v_prev = self.v_prev, self.v
        self.v = spare
        if self.check_residual:
            rhs = self._rhs()
        kernels.emt_step(self.lu, self.piv, self.frm, self.to, self.tscale, self.G, self.P, self.Q,
                         self.hist, self.emf, self.inj, self.v, self.ibr)
        self.k += 1
        self.t = self.k * self.h
        if not math.isfinite(self.v.sum()):
            bad = int(np.flatnonzero(~np.isfinite(self.v))[0])
            raise NumericalError(self.t, self.net.node_names[bad])
        if self.check_residual:
            res = np.linalg.norm(self.Y @ self.v - rhs)
            scale = np.linalg.norm(rhs)
            rel = res / scale if scale > 0 else res
            self.max_residual = max(self.max_residual, rel)
        self._vring[self.k % self._ring_len] = self.v
        if self.triggers:
            self._check_triggers()
        return self.v

    def run(self, n_steps, before_step=None):
        for _ in range(n_steps):
            if before_step is not None:
                before_step(self)
            self.step()

    # --------------------------------------------------------- switching
    def switch_at_pow(self, block, mode, ref, timeout=None):
        """Arm a closing trigger on ``block`` referenced to node ``ref``.

        mode: "peak" closes at a local extremum whose magnitude is within 1% of
        the last-cycle amplitude; "zero" closes at a sign change; "immediate"
        closes before the next step.
        """
        if isinstance(block, str):
            block = self.net.block_index(block)
        if isinstance(ref, str):
            ref = self.net.node(ref)
        if mode == "immediate":
            self.set_switch(block, True)
            return self.t
        if mode not in ("peak", "zero"):
            raise ValueError(f"unknown point-on-wave mode {mode!r}")
        if timeout is None:
            timeout = 2.0 / self.f0
        self.triggers.append(_Trigger(block, ref, mode, self.t, self.t + timeout))
        return None

    def _check_triggers(self):
        keep = []
        for trg in self.triggers:
            v0, v1, v2 = self.v_prev2[trg.ref], self.v_prev[trg.ref], self.v[trg.ref]
            hit = False
            if trg.mode == "zero":
                hit = (v1 < 0.0 <= v2) or (v1 > 0.0 >= v2)
            else:
                if (v1 - v0) * (v2 - v1) < 0.0:
                    amp = np.abs(self._vring[:, trg.ref]).max()
                    hit = abs(v1) >= 0.99 * amp
            if hit and self.t > trg.armed_at:
                trg.fired = self.t
                self.set_switch(trg.block, True)
            elif self.t > trg.deadline:
                raise SwitchTimeout(f"point-on-wave trigger on {self.net.blocks[trg.block].name!r} "
                                    f"did not fire by t={trg.deadline:.6g} s")
            else:
                keep.append(trg)
        self.triggers = keep

    # ------------------------------------------------------------- state
    def snapshot(self):
        return EmtState(self.t, self.k, self.v.copy(), self.hist.copy(), self.ibr.copy(), self.closed.copy())

    def port_current(self, block):
        return self.ibr[block]


def switch_at_pow(engine, element, mode, ref, timeout=None):
    return engine.switch_at_pow(element, mode, ref, timeout)


# --------------------------------------------------------------- devices


@dataclass
class GridFormingConfig:
    kind: str = "bess"  # "bess" or "genset"
    rating_mva: float = 2.0
    v_ll: float = 4160.0
    f0: float = 60.0
    kp_hz: float = 0.3  # Hz per pu active power
    kq: float = 0.05  # pu voltage per pu reactive power
    r_pu: float = 0.01
    x_pu: float = 0.08
    tau_v: float = 0.005  # lag on both droop commands (BESS)
    inertia_h: float = 1.5
    tau_gov: float = 0.5
    tau_avr: float = 0.2
    v_set_pu: float = 1.0
    # damped shunt output filter (series R-C per phase); c_filter_pu = 0 drops it
    c_filter_pu: float = 0.05
    r_damp_pu: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bess", "genset"):
            raise ValueError(f"unknown grid-forming kind {self.kind!r}")
        if self.rating_mva <= 0:
            raise ValueError("rating must be positive")
        if self.kp_hz < 0 or self.kq < 0:
            raise ValueError("droops must be nonnegative")
        if self.c_filter_pu < 0 or (self.c_filter_pu > 0 and self.r_damp_pu <= 0):
            raise ValueError("filter capacitance must be nonnegative with a positive damping resistor")
        for name in ("tau_v", "inertia_h", "tau_gov", "tau_avr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def genset(cls, **kw):
        kw.setdefault("rating_mva", 3.125)
        return cls(kind="genset", **kw)

    @property
    def s_base(self):
        return self.rating_mva * 1e6

    @property
    def z_base(self):
        return self.v_ll**2 / self.s_base

    @property
    def v_ln(self):
        return self.v_ll / math.sqrt(3.0)

    @property
    def r_ohm(self):
        return self.r_pu * self.z_base

    @property
    def l_h(self):
        return self.x_pu * self.z_base / (TWO_PI * self.f0)


@dataclass
class GridFormingState:
    f: float = 60.0  # Hz, commanded / rotor frequency
    e: float = 1.0  # pu EMF magnitude
    pm: float = 0.0  # pu mechanical power (genset)
    theta: float = 0.0  # rad, EMF angle of phase a


def grid_forming_step(cfg, p, q, state, h):
    """Advance the droop controller one step.

    ``p`` and ``q`` are three-phase output powers in W and var. Returns the
    commanded per-phase EMF magnitude (pu) and frequency (Hz) and advances
    the EMF angle for the next step.
    """
    p_pu = p / cfg.s_base
    q_pu = q / cfg.s_base
    e_ref = cfg.v_set_pu - cfg.kq * q_pu
    if cfg.kind == "bess":
        a = -math.expm1(-h / cfg.tau_v)
        state.f += a * (cfg.f0 - cfg.kp_hz * p_pu - state.f)
        state.e += a * (e_ref - state.e)
    else:
        # governor droop in pu speed maps to the same Hz-per-pu slope
        pm_ref = -(state.f - cfg.f0) / cfg.kp_hz if cfg.kp_hz > 0 else state.pm
        state.pm += -math.expm1(-h / cfg.tau_gov) * (pm_ref - state.pm)
        state.e += -math.expm1(-h / cfg.tau_avr) * (e_ref - state.e)
        dw = (state.pm - p_pu) / (2.0 * cfg.inertia_h)
        state.f += dw * cfg.f0 * h
    state.theta += TWO_PI * state.f * h
    if state.theta > math.pi:
        state.theta -= TWO_PI
    return np.full(3, state.e), state.f


def three_phase_pq(v, i):
    """Instantaneous three-phase active and reactive power (W, var)."""
    va, vb, vc = v
    ia, ib, ic = i
    p = va * ia + vb * ib + vc * ic
    q = ((va - vb) * ic + (vb - vc) * ia + (vc - va) * ib) / math.sqrt(3.0)
    return p, q


class GridFormingUnit:
    """Grid-forming device bound to a source block of an engine."""

    def __init__(self, net, bus, cfg=None, name="gfm"):
        self.cfg = cfg or GridFormingConfig()
        self.nodes = net.nodes3(bus)
        self.block = net.add_source(name, self.nodes, self.cfg.r_ohm, self.cfg.l_h)
        if self.cfg.c_filter_pu > 0:
            # without it the trapezoidal source inductor fed by an unfiltered current
            # source keeps any slope change alive as an undamped Nyquist oscillation
            c = self.cfg.c_filter_pu / (2 * math.pi * self.cfg.f0 * self.cfg.z_base)
            r = self.cfg.r_damp_pu * self.cfg.z_base
            for p, a in zip("abc", self.nodes):
                mid = net.node(f"{name}_f.{p}")
                net.add_capacitor(f"{name}_cf.{p}", a, mid, c)
                net.add_resistor(f"{name}_rd.{p}", mid, -1, r)
        self.state = GridFormingState(f=self.cfg.f0, e=self.cfg.v_set_pu)
        self.p = 0.0
        self.q = 0.0
        self._amp = SQRT2 * self.cfg.v_ln

    def start(self, engine):
        self._set_emf(engine)

    def _set_emf(self, engine):
        th = self.state.theta
        a = self._amp * self.state.e
        emf = engine.emf[self.block]
        emf[0] = a * math.cos(th)
        emf[1] = a * math.cos(th - 2.0 * math.pi / 3.0)
        emf[2] = a * math.cos(th + 2.0 * math.pi / 3.0)

    def terminal_voltage(self, engine):
        return engine.v[self.nodes]

    def output_current(self, engine):
        # port current flows from the terminal into the source, so negate it
        return -engine.ibr[self.block]

    def update(self, engine):
        v = engine.v
        ib = engine.ibr[self.block]
        n = self.nodes
        self.p, self.q = three_phase_pq((v[n[0]], v[n[1]], v[n[2]]), (-ib[0], -ib[1], -ib[2]))
        grid_forming_step(self.cfg, self.p, self.q, self.state, engine.h)
        self._set_emf(engine)


# ------------------------------------------------------------------- PLL


@dataclass
class PllState:
    theta: float = 0.0
    omega: float = TWO_PI * 60.0
    integ: float = 0.0


@dataclass
class PllConfig:
    f0: float = 60.0
    wn: float = TWO_PI * 25.0
    zeta: float = 1.0

    @property
    def kp(self):
        return 2.0 * self.zeta * self.wn

    @property
    def ki(self):
        return self.wn * self.wn


def pll_step(v_abc, state, h, cfg=None):
    """One SRF-PLL update on a phase-voltage sample.

    Locks ``theta`` to the phase-a cosine angle. Returns (omega, theta) where
    theta is the estimate for the next sample instant.
    """
    cfg = cfg or _DEFAULT_PLL
    va, vb, vc = v_abc
    alpha = (2.0 * va - vb - vc) / 3.0
    beta = (vb - vc) / math.sqrt(3.0)
    amp = math.hypot(alpha, beta)
    th = state.theta
    vq = -alpha * math.sin(th) + beta * math.cos(th)
    err = vq / amp if amp > 1e-9 else 0.0
    state.integ += cfg.ki * err * h
    w0 = TWO_PI * cfg.f0
    state.omega = w0 + state.integ + cfg.kp * err
    th += state.omega * h
    if th > math.pi:
        th -= TWO_PI
    state.theta = th
    return state.omega, state.theta


_DEFAULT_PLL = PllConfig()


class Pll:
    def __init__(self, nodes, cfg=None, theta0=0.0):
        self.nodes = np.asarray(nodes)
        self.cfg = cfg or PllConfig()
        self.state = PllState(theta=theta0, omega=TWO_PI * self.cfg.f0)

    @property
    def theta(self):
        return self.state.theta

    @property
    def omega(self):
        return self.state.omega

    def update(self, engine):
        v = engine.v
        n = self.nodes
        return pll_step((v[n[0]], v[n[1]], v[n[2]]), self.state, engine.h, self.cfg)
