"""Quasi-static unbalanced power flow by ladder forward-backward sweep.

The backward sweep (bus currents -> branch currents) and the forward sweep
(branch currents -> voltage drops) are linear for a fixed topology and tap
setting, so both are folded once into dense matrices::

    I_branch = B @ I_bus
    V        = S @ V_slack - M @ I_bus

and each iteration is a pair of matrix-vector products followed by a fresh
evaluation of the nonlinear bus currents.
"""
import numpy as np

from .feeder import PHASES, ZIP_CLAMP_PU
from .phasors import PhasorSet

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100


class PowerFlowError(RuntimeError):
    def __init__(self, message, bus=None, mismatch=None, iterations=None):
        self.bus = bus
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(message)


class PowerFlowSolution:
    """Converged operating point. Per-bus dictionaries are built on first use."""

    def __init__(self, solver, v_nodes, v_slack, i_bus, maps, i_slack, iterations, max_mismatch):
        self.solver = solver
        self.v_nodes = v_nodes  # complex volts in solver node order
        self.v_slack = v_slack
        self.i_bus = i_bus
        self._maps = maps
        self.i_slack = i_slack  # complex[3] amps drawn from the slack source
        self.iterations = iterations
        self.max_mismatch = max_mismatch
        self.s_slack = v_slack * np.conj(i_slack)  # complex[3] VA delivered by the slack
        self._v = None
        self._v_pu = None
        self._branch_i = None

    @property
    def v(self):
        """bus -> complex[3] volts (0 on absent phases)."""
        if self._v is None:
            s = self.solver
            out = {s.slack_id: self.v_slack.copy()}
            for bus_id, ix in s.idx.items():
                sel = ix >= 0
                vb = np.zeros(3, dtype=complex)
                vb[sel] = self.v_nodes[ix[sel]]
                out[bus_id] = vb
            self._v = out
        return self._v

    @property
    def v_pu(self):
        """bus -> float[3] magnitude in pu (nan on absent phases)."""
        if self._v_pu is None:
            s = self.solver
            out = {s.slack_id: np.where(s.slack_mask, np.abs(self.v_slack) / s.slack_base, np.nan)}
            for bus_id, ix in s.idx.items():
                sel = ix >= 0
                mag = np.full(3, np.nan)
                mag[sel] = np.abs(self.v_nodes[ix[sel]]) / s.bus_base[ix[sel]]
                out[bus_id] = mag
            self._v_pu = out
        return self._v_pu

    @property
    def branch_i(self):
        """branch id -> complex[3] amps at the sending end."""
        if self._branch_i is None:
            self._branch_i = {bid: Bm @ self.i_bus for bid, Bm in self._maps["B"].items()}
        return self._branch_i

    def node_pu(self, index):
        """pu magnitudes at solver node indices; index -1-k selects slack phase k."""
        s = self.solver
        index = np.asarray(index)
        ext = np.concatenate([np.abs(self.v_nodes) / s.bus_base, np.abs(self.v_slack) / s.slack_base])
        return ext[np.where(index >= 0, index, s.n - 1 - index)]

    def node_voltage(self, bus_id):
        """complex[3] volts at one bus without building the full dictionary."""
        s = self.solver
        if bus_id == s.slack_id:
            return self.v_slack.copy()
        ix = s.idx[bus_id]
        out = np.zeros(3, dtype=complex)
        out[ix >= 0] = self.v_nodes[ix[ix >= 0]]
        return out

    @property
    def slack_current(self):
        return PhasorSet.from_complex(self.i_slack)

    def voltage_table(self):
        """(bus, phase) -> pu magnitude for every present phase."""
        out = {}
        for bus, vpu in self.v_pu.items():
            for k, p in enumerate(PHASES):
                if not np.isnan(vpu[k]):
                    out[(bus, p)] = float(vpu[k])
        return out


class PhasorSolver:
    """Sweep solver bound to one feeder. Holds registered current injections."""

    def __init__(self, model, s_base=1e6):
        self.model = model
        self.s_base = s_base
        self.injections = {}
        self._maps = {}
        self._lin = {}
        self._index()

    # -------------------------------------------------------------- topology
    def _index(self):
        m = self.model
        self.slack_id = m.slack_bus_id
        idx = {}
        n = 0
        for bus_id in m.order[1:]:
            bus = m.bus_map[bus_id]
            ix = np.full(3, -1)
            for k in range(3):
                if bus.mask[k]:
                    ix[k] = n
                    n += 1
            idx[bus_id] = ix
        self.n = n
        self.idx = idx
        self.bus_base = np.zeros(n)
        for bus_id, ix in idx.items():
            vb = m.bus_map[bus_id].v_base
            self.bus_base[ix[ix >= 0]] = vb
        self.slack_base = m.slack.v_base
        self.slack_mask = m.slack.mask

        # load table: each row is one loaded phase; column -1 in 'node' means the slack bus
        rows = []
        for ld in m.loads:
            for k, p in enumerate(PHASES):
                if p not in ld.phases:
                    continue
                node = -1 if ld.bus == self.slack_id else idx[ld.bus][k]
                vb = m.bus_map[ld.bus].v_base
                rows.append((node, k, ld.p_kw[k] * 1e3, ld.q_kvar[k] * 1e3, *ld.zip_p, *ld.zip_q, vb))
        self._load_rows = rows
        self._loads = self._load_arrays(rows)

        # line charging: half of each branch shunt admittance at both ends
        ysh = np.zeros((n, n), dtype=complex)
        ysh_slack = np.zeros((3, 3), dtype=complex)
        for br in m.branches:
            half = br.y / 2
            for end in (br.from_bus, br.to_bus):
                if end == self.slack_id:
                    ysh_slack += half
                else:
                    ix = idx[end]
                    mask = ix >= 0
                    sel = ix[mask]
                    ysh[np.ix_(sel, sel)] += half[np.ix_(mask, mask)]
        self._ysh_lines = ysh
        self._ysh_lines_slack = ysh_slack

    @staticmethod
    def _load_arrays(rows):
        if not rows:
            empty = np.zeros(0)
            return {"node": np.zeros(0, int), "phase": np.zeros(0, int), "p": empty, "q": empty,
                    "zp": np.zeros((0, 3)), "zq": np.zeros((0, 3)), "vb": empty}
        a = np.array(rows, dtype=float)
        return {"node": a[:, 0].astype(int), "phase": a[:, 1].astype(int), "p": a[:, 2], "q": a[:, 3],
                "zp": a[:, 4:7], "zq": a[:, 7:10], "vb": a[:, 10]}

    def tap_ratios(self, taps=None):
        """branch id -> ratio[3] for every regulated branch, scenario taps overriding the file."""
        out = {}
        for reg in self.model.regulators:
            out[reg.branch] = reg.ratio
        for reg_id, t in (taps or {}).items():
            reg = next((r for r in self.model.regulators if r.id == reg_id), None)
            if reg is None:
                raise KeyError(f"unknown regulator {reg_id!r}")
            out[reg.branch] = 1.0 + 0.00625 * np.asarray(t, dtype=float)
        return out

    def sweep_maps(self, taps=None):
        key = tuple(sorted((k, tuple(v)) for k, v in (taps or {}).items()))
        if key not in self._maps:
            self._maps[key] = self._build_maps(self.tap_ratios(taps))
        return self._maps[key]

    def _build_maps(self, ratios):
        m = self.model
        n = self.n
        B = {}
        for bus_id in reversed(m.order[1:]):
            br = m.parent_branch[bus_id]
            ix = self.idx[bus_id]
            rows = np.zeros((3, n), dtype=complex)
            for k in range(3):
                if ix[k] >= 0:
                    rows[k, ix[k]] = 1.0
            for child in m.children[bus_id]:
                rows += B[child.id]
            a = ratios.get(br.id, np.ones(3))
            B[br.id] = a[:, None] * rows
        S = {}
        Mz = {}
        S[self.slack_id] = np.eye(3, dtype=complex)
        Mz[self.slack_id] = np.zeros((3, n), dtype=complex)
        for bus_id in m.order[1:]:
            br = m.parent_branch[bus_id]
            a = ratios.get(br.id, np.ones(3))
            mask = m.bus_map[bus_id].mask
            z = np.where(np.outer(mask, mask), br.z, 0)
            S[bus_id] = a[:, None] * S[br.from_bus] * mask[:, None]
            Mz[bus_id] = a[:, None] * (Mz[br.from_bus] + z @ B[br.id]) * mask[:, None]
        smap = np.zeros((n, 3), dtype=complex)
        mmap = np.zeros((n, n), dtype=complex)
        for bus_id, ix in self.idx.items():
            sel = ix >= 0
            smap[ix[sel]] = S[bus_id][sel]
            mmap[ix[sel]] = Mz[bus_id][sel]
        kslack = np.zeros((3, n), dtype=complex)
        for child in m.children[self.slack_id]:
            kslack += B[child.id]
        return {"S": smap, "M": mmap, "K": kslack, "B": B}

    # ----------------------------------------------------------------- solve
    def inject_current(self, bus_id, current):
        """Register a fixed current drawn at ``bus_id`` (load convention, A) for later solves."""
        if bus_id not in self.model.bus_map:
            raise KeyError(f"unknown bus {bus_id!r}")
        if isinstance(current, PhasorSet):
            current = current.to_complex()
        current = np.asarray(current, dtype=complex).reshape(3)
        if not np.any(current):
            self.injections.pop(bus_id, None)
        else:
            self.injections[bus_id] = current

    def clear_injections(self):
        self.injections.clear()

    def _shunts(self, switch_states):
        ysh = self._ysh_lines.copy()
        ysh_slack = self._ysh_lines_slack.copy()
        for cap in self.model.shunt_caps:
            closed = cap.closed if switch_states is None else switch_states.get(cap.id, cap.closed)
            if not closed:
                continue
            vb = self.model.bus_map[cap.bus].v_base
            y = 1j * cap.kvar * 1e3 / vb**2
            if cap.bus == self.slack_id:
                ysh_slack += np.diag(y)
            else:
                ix = self.idx[cap.bus]
                for k in range(3):
                    if ix[k] >= 0 and y[k] != 0:
                        ysh[ix[k], ix[k]] += y[k]
        return ysh, ysh_slack

    def _compile(self, extra=None):
        """Flatten the load table (plus extra loads) for vectorized evaluation.

        Row j reads its voltage from ``v_ext = [v, v_slack]`` at ``agg[j]``.
        """
        L = self._loads
        if extra is not None and len(extra["node"]):
            L = {k: np.concatenate([L[k], extra[k]]) for k in L}
        node = L["node"]
        pq = np.vstack([L["p"], L["q"]])
        zp, zq = L["zp"].T, L["zq"].T
        # per-row coefficients of (az*V + ai)*V + ap*min((V/clamp)^2, 1), scaled by P and Q
        return {"agg": np.where(node >= 0, node, self.n + L["phase"]), "inv_vb": 1.0 / L["vb"],
                "az": pq * np.vstack([zp[0], zq[0]]), "ai": pq * np.vstack([zp[1], zq[1]]),
                "ap": pq * np.vstack([zp[2], zq[2]]), "size": self.n + 3}

    def _load_current(self, v, v_slack, table):
        """Current drawn by the compiled loads over [nodes, slack phases]."""
        size = table["size"]
        agg = table["agg"]
        if len(agg) == 0:
            return np.zeros(size, dtype=complex)
        vx = np.concatenate([v, v_slack])[agg]
        vm = np.abs(vx)
        u = vm * table["inv_vb"]
        f = (table["az"] * u + table["ai"]) * u + table["ap"] * np.minimum(u * u * (1.0 / ZIP_CLAMP_PU**2), 1.0)
        if vm.all():
            cur = np.conj((f[0] + 1j * f[1]) / vx)
        else:
            live = vm > 0
            cur = np.where(live, np.conj((f[0] + 1j * f[1]) / np.where(live, vx, 1.0)), 0)
        return np.bincount(agg, cur.real, size) + 1j * np.bincount(agg, cur.imag, size)

    def extra_loads(self, loads):
        """Compile additional ZIP loads (e.g. scenario load steps) for ``solve``."""
        rows = []
        for ld in loads:
            for k, p in enumerate(PHASES):
                if p in ld.phases:
                    node = -1 if ld.bus == self.slack_id else self.idx[ld.bus][k]
                    vb = self.model.bus_map[ld.bus].v_base
                    rows.append((node, k, ld.p_kw[k] * 1e3, ld.q_kvar[k] * 1e3, *ld.zip_p, *ld.zip_q, vb))
        return self._load_arrays(rows) if rows else None

    def _injection_vectors(self):
        i_nodes = np.zeros(self.n, dtype=complex)
        i_slack = np.zeros(3, dtype=complex)
        for bus_id, cur in self.injections.items():
            if bus_id == self.slack_id:
                i_slack += cur
            else:
                ix = self.idx[bus_id]
                sel = ix >= 0
                i_nodes[ix[sel]] += cur[sel]
        return i_nodes, i_slack

    def solve(self, slack, switch_states=None, taps=None, extra_loads=None,
              tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        """Solve with the slack bus held at ``slack`` (PhasorSet or complex volts)."""
        vs = slack.to_complex() if isinstance(slack, PhasorSet) else np.asarray(slack, dtype=complex)
        vs = np.where(self.slack_mask, vs, 0)
        if np.any(np.abs(vs[self.slack_mask]) <= 0):
            raise ValueError("slack magnitudes must be positive on all present phases")
        maps = self.sweep_maps(taps)
        lin = self._linear(maps, taps, switch_states)
        ysh = lin["ysh"]
        extra = self.extra_loads(extra_loads) if extra_loads and not isinstance(extra_loads, dict) else extra_loads
        inj_nodes, inj_slack = self._injection_vectors()
        table = self._compile(extra)
        n = self.n
        # shunts are linear and already folded into S2, M2; iterate on load currents only
        M2 = lin["M"]
        v_fixed = lin["S"] @ vs
        v = maps["S"] @ vs  # flat start
        i_src = self._load_current(v, vs, table)[:n] + inj_nodes
        worst = np.inf
        worst_ix = 0
        it = 0
        for it in range(1, max_iter + 1):
            v = v_fixed - M2 @ i_src
            i_new = self._load_current(v, vs, table)[:n] + inj_nodes
            mism = np.abs(v * np.conj(i_new - i_src)) / self.s_base
            worst_ix = int(np.argmax(mism)) if n else 0
            worst = float(mism[worst_ix]) if n else 0.0
            i_src = i_new
            if worst <= tol:
                break
        else:
            bus = self._bus_of(worst_ix)
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations; worst bus {bus} mismatch {worst:.3e} pu",
                bus=bus, mismatch=worst, iterations=max_iter)
        v = v_fixed - M2 @ i_src
        i_bus = i_src + ysh @ v
        i_slack = maps["K"] @ i_bus + self._load_current(v, vs, table)[n:] + lin["ysh_slack"] @ vs + inj_slack
        return PowerFlowSolution(self, v, vs, i_bus, maps, i_slack, it, worst)

    def _linear(self, maps, taps, switch_states):
        """Sweep maps with the shunt admittances folded in, cached per tap and switch state:
        V = S2 Vs - M2 I with S2 = (1 + M Ysh)^-1 S and M2 = (1 + M Ysh)^-1 M."""
        states = {c.id: (c.closed if switch_states is None else bool(switch_states.get(c.id, c.closed)))
                  for c in self.model.shunt_caps}
        key = (tuple(sorted((k, tuple(v)) for k, v in (taps or {}).items())), tuple(sorted(states.items())))
        lin = self._lin.get(key)
        if lin is None:
            ysh, ysh_slack = self._shunts(states)
            A = np.eye(self.n) + maps["M"] @ ysh
            X = np.linalg.solve(A, np.hstack([maps["S"], maps["M"]])) if self.n else np.zeros((0, 3 + self.n))
            lin = {"S": X[:, :3], "M": np.ascontiguousarray(X[:, 3:]), "ysh": ysh, "ysh_slack": ysh_slack}
            self._lin[key] = lin
        return lin

    def _bus_of(self, node):
        for bus_id, ix in self.idx.items():
            if node in ix:
                return bus_id
        return None

def solve(model, slack, switch_states=None, taps=None, **kw):
    """One-shot solve; builds a throwaway PhasorSolver."""
    return PhasorSolver(model).solve(slack, switch_states, taps, **kw)


def inject_current(solver, bus_id, current):
    solver.inject_current(bus_id, current)
