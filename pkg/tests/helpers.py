"""Shared builders and an independent dense-circuit oracle for the tests."""
import numpy as np

from emtts.feeder import PHASES, ZIP_CLAMP_PU, from_dict

KV = 4.16
V_LN = KV * 1e3 / np.sqrt(3.0)
A120 = np.exp(-2j * np.pi / 3)
BALANCED = np.array([1.0, A120, A120.conjugate()])


def zmat(r=0.3, x=0.6, rm=0.1, xm=0.3):
    """Symmetric 3x3 series impedance (ohm) with mutual coupling."""
    R = np.full((3, 3), rm)
    np.fill_diagonal(R, r)
    X = np.full((3, 3), xm)
    np.fill_diagonal(X, x)
    return {"r": R.tolist(), "x": X.tolist()}


def two_bus(load=None, z=None, y=None, caps=(), regs=()):
    """Slack bus 's' feeding bus 'b' through one branch."""
    br = {"id": "sb", "from": "s", "to": "b", "phases": "abc", "z": z or zmat()}
    if y is not None:
        br["y"] = y
    d = {
        "slack": "s",
        "buses": [{"id": "s", "kv": KV, "phases": "abc"}, {"id": "b", "kv": KV, "phases": "abc"}],
        "branches": [br],
        "loads": [] if load is None else [load],
        "shunt_caps": list(caps),
        "regulators": list(regs),
    }
    return d


def chain(n, phases="abc", **load_kw):
    """Slack plus n-1 buses in a line, a load on the last bus."""
    buses = [{"id": f"n{i}", "kv": KV, "phases": phases} for i in range(n)]
    branches = [{"id": f"br{i}", "from": f"n{i - 1}", "to": f"n{i}", "phases": phases,
                 "z": zmat(0.1 * i, 0.2 * i, 0.03 * i, 0.08 * i)} for i in range(1, n)]
    loads = [{"id": "ld", "bus": f"n{n - 1}", "phases": phases, **load_kw}] if load_kw else []
    return {"slack": "n0", "buses": buses, "branches": branches, "loads": loads}


def random_feeder(rng, n_bus=None, with_regs=True, zip_mix=True):
    """Random radial feeder description with one- to three-phase laterals."""
    n_bus = n_bus or int(rng.integers(3, 9))
    buses = [{"id": "0", "kv": KV, "phases": "abc"}]
    branches = []
    loads = []
    caps = []
    regs = []
    phases_of = {"0": "abc"}
    for i in range(1, n_bus):
        parent = str(int(rng.integers(0, i)))
        pp = phases_of[parent]
        k = int(rng.integers(1, len(pp) + 1))
        ph = "".join(sorted(rng.choice(list(pp), size=k, replace=False)))
        bid = str(i)
        phases_of[bid] = ph
        buses.append({"id": bid, "kv": KV, "phases": ph})
        r = rng.uniform(0.05, 0.5)
        x = rng.uniform(0.1, 1.0)
        Z = zmat(r, x, r * rng.uniform(0.1, 0.4), x * rng.uniform(0.2, 0.5))
        b = rng.uniform(1e-6, 2e-5)
        Y = {"g": np.zeros((3, 3)).tolist(), "b": (np.eye(3) * b - (1 - np.eye(3)) * b * 0.2).tolist()}
        branches.append({"id": f"l{i}", "from": parent, "to": bid, "phases": ph, "z": Z, "y": Y})
        if with_regs and len(ph) == 3 and rng.random() < 0.3:
            regs.append({"id": f"r{i}", "branch": f"l{i}", "taps": rng.integers(-8, 9, 3).tolist()})
        if rng.random() < 0.8:
            zp = rng.dirichlet([1, 1, 1]).tolist() if zip_mix else [1.0, 0.0, 0.0]
            zq = rng.dirichlet([1, 1, 1]).tolist() if zip_mix else [1.0, 0.0, 0.0]
            zp[2] = 1.0 - zp[0] - zp[1]
            zq[2] = 1.0 - zq[0] - zq[1]
            loads.append({"id": f"ld{i}", "bus": bid, "phases": ph,
                          "p_kw": rng.uniform(5, 150, len(ph)).tolist(),
                          "q_kvar": rng.uniform(-20, 80, len(ph)).tolist(), "zip_p": zp, "zip_q": zq})
        if rng.random() < 0.25:
            caps.append({"id": f"c{i}", "bus": bid, "phases": ph, "kvar": rng.uniform(10, 100, len(ph)).tolist(),
                         "closed": bool(rng.random() < 0.7)})
    return {"slack": "0", "buses": buses, "branches": branches, "loads": loads, "shunt_caps": caps,
            "regulators": regs}


def model_of(d, name="test"):
    return from_dict(d, name)


# --------------------------------------------------------------- oracle
def dense_solve(model, vs, switch_states=None, taps=None, tol=1e-15, max_iter=2000):
    """Nodal admittance solve of the whole feeder, independent of the sweep.

    Every present bus phase is one node. A branch with regulator ratio a
    (per phase, to-side voltage = a x internal) contributes the two-port
    [[y, -y/a], [-y/a, y/a^2]] and half its charging admittance at each
    end. Loads are iterated as currents with a Gauss fixed point on the
    dense matrix. Returns {bus: complex[3]} (zeros on absent phases).
    """
    nodes = {}
    for b in model.buses:
        for k, p in enumerate(PHASES):
            if p in b.phases:
                nodes[(b.id, k)] = len(nodes)
    n = len(nodes)
    Y = np.zeros((n, n), complex)
    ratios = {r.branch: r.ratio for r in model.regulators}
    for reg_id, t in (taps or {}).items():
        reg = next(r for r in model.regulators if r.id == reg_id)
        ratios[reg.branch] = 1.0 + 0.00625 * np.asarray(t, float)
    for br in model.branches:
        ph = [k for k in range(3) if PHASES[k] in model.bus_map[br.to_bus].phases]
        y = np.linalg.inv(br.z[np.ix_(ph, ph)])
        a = ratios.get(br.id, np.ones(3))[ph]
        f = [nodes[(br.from_bus, k)] for k in ph]
        t = [nodes[(br.to_bus, k)] for k in ph]
        Dinv = np.diag(1.0 / a)
        Y[np.ix_(f, f)] += y
        Y[np.ix_(f, t)] -= y @ Dinv
        Y[np.ix_(t, f)] -= Dinv @ y
        Y[np.ix_(t, t)] += Dinv @ y @ Dinv
        half = br.y / 2
        for bus in (br.from_bus, br.to_bus):
            pres = [k for k in range(3) if PHASES[k] in model.bus_map[bus].phases]
            ix = [nodes[(bus, k)] for k in pres]
            Y[np.ix_(ix, ix)] += half[np.ix_(pres, pres)]
    for cap in model.shunt_caps:
        closed = cap.closed if switch_states is None else switch_states.get(cap.id, cap.closed)
        if not closed:
            continue
        vb = model.bus_map[cap.bus].v_base
        for k in range(3):
            if PHASES[k] in cap.phases:
                i = nodes[(cap.bus, k)]
                Y[i, i] += 1j * cap.kvar[k] * 1e3 / vb**2
    slack = [nodes[(model.slack_bus_id, k)] for k in range(3) if PHASES[k] in model.slack.phases]
    rest = [i for i in range(n) if i not in slack]
    vs = np.asarray(vs, complex)[[k for k in range(3) if PHASES[k] in model.slack.phases]]

    rows = []
    for ld in model.loads:
        vb = model.bus_map[ld.bus].v_base
        for k in range(3):
            if PHASES[k] in ld.phases:
                rows.append((nodes[(ld.bus, k)], ld.p_kw[k] * 1e3, ld.q_kvar[k] * 1e3, ld.zip_p, ld.zip_q, vb))

    def load_current(v):
        cur = np.zeros(n, complex)
        for i, p, q, zp, zq, vb in rows:
            u = abs(v[i]) / vb
            clamp = min(u * u / ZIP_CLAMP_PU**2, 1.0)
            s = p * (zp[0] * u * u + zp[1] * u + zp[2] * clamp) + 1j * q * (zq[0] * u * u + zq[1] * u + zq[2] * clamp)
            cur[i] += np.conj(s / v[i])
        return cur

    v = np.zeros(n, complex)
    v[slack] = vs
    Yrr = Y[np.ix_(rest, rest)]
    Yrs = Y[np.ix_(rest, slack)]
    lu = np.linalg.inv(Yrr)
    base = -lu @ (Yrs @ vs)
    # flat start: no-load solution
    v[rest] = base
    for _ in range(max_iter):
        new = base - lu @ load_current(v)[rest]
        done = np.max(np.abs(new - v[rest])) <= tol * V_LN
        v[rest] = new
        if done:
            break
    out = {}
    for b in model.buses:
        arr = np.zeros(3, complex)
        for k in range(3):
            if (b.id, k) in nodes:
                arr[k] = v[nodes[(b.id, k)]]
        out[b.id] = arr
    return out
