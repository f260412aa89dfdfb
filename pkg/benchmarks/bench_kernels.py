"""Compiled vs numpy kernels: wall time per EMT step and per window push.

    python3 benchmarks/bench_kernels.py [--steps 2000] [--sizes 4,25,125]

Each size is a radial chain of three-phase buses (series RL, shunt C and a
resistive load per bus) behind a source, roughly the element mix of the
full-EMT feeders.
"""
import argparse
import time

import numpy as np
from scipy.linalg import lu_factor

from emtts import kernels
from emtts.emt import EmtEngine, EmtNetwork, build_companion


def chain_engine(n_bus, h=100e-6):
    net = EmtNetwork(h)
    buses = [net.nodes3(f"b{i}") for i in range(n_bus)]
    net.add_source("src", buses[0], 0.05, 1e-3)
    for i in range(1, n_bus):
        net.add_rl3(f"l{i}", buses[i - 1], buses[i], np.eye(3) * 0.2 + 0.05, np.eye(3) * 8e-4 + 2e-4)
        net.add_shunt_c3(f"c{i}", buses[i], np.eye(3) * 2e-7)
        for k in range(3):
            net.add_resistor(f"r{i}.{k}", buses[i][k], -1, 200.0)
    return EmtEngine(net)


def time_emt_step(impl, eng, steps):
    lu, piv = lu_factor(build_companion(eng.net))
    lu = np.ascontiguousarray(lu)
    piv = np.ascontiguousarray(piv, dtype=np.intc)
    hist = np.zeros_like(eng.hist)
    ibr = np.zeros_like(eng.ibr)
    v = np.zeros(eng.net.n_nodes)
    inj = np.zeros_like(v)
    emf = np.zeros_like(eng.emf)
    w = 2 * np.pi * 60 * eng.h
    ph = np.array([0.0, -2.0944, 2.0944])
    t0 = time.perf_counter()
    for k in range(steps):
        emf[0] = 3400.0 * np.cos(w * k + ph)
        impl.emt_step(lu, piv, eng.frm, eng.to, eng.tscale, eng.G, eng.P, eng.Q, hist, emf, inj, v, ibr)
    return (time.perf_counter() - t0) / steps


def time_ring_push(impl, steps, rows=9, cap=170):
    buf = np.zeros((rows, cap))
    cum = np.zeros((rows, cap))
    run = np.zeros(rows)
    new = np.ones(rows)
    t0 = time.perf_counter()
    for k in range(steps):
        impl.ring_push(buf, cum, run, k % cap, new)
    return (time.perf_counter() - t0) / steps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--sizes", default="4,25,125")
    args = ap.parse_args(argv)
    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<10}{'buses':>6}{'nodes':>7}" + "".join(f"{b + ' us':>13}" for b in backends) + f"{'speedup':>10}")
    for n in (int(x) for x in args.sizes.split(",")):
        eng = chain_engine(n)
        res = {b: time_emt_step(impl, eng, args.steps) * 1e6 for b, impl in backends.items()}
        ratio = res["python"] / res["cython"] if "cython" in res else float("nan")
        print(f"{'emt_step':<10}{n:>6}{eng.net.n_nodes:>7}" + "".join(f"{x:>13.2f}" for x in res.values())
              + f"{ratio:>9.1f}x")
    res = {b: time_ring_push(impl, args.steps * 10) * 1e6 for b, impl in backends.items()}
    ratio = res["python"] / res["cython"] if "cython" in res else float("nan")
    print(f"{'ring_push':<10}{'':>6}{'':>7}" + "".join(f"{x:>13.3f}" for x in res.values()) + f"{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
