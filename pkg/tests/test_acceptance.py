"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the measured values.
"""
import math
from functools import lru_cache

import numpy as np
import pytest

from emtts.bench import (FullEmtSimulation, cost_report, pcc_rms_pu, peak_pu, settling_time, steady_state_report,
                         transient_excursion, transient_rmse, waveform_spike)
from emtts.coupling import ExtractionWindow, ReconstructionState, filter_response
from emtts.emt import EmtEngine, EmtNetwork
from emtts.feeder import from_dict
from emtts.orchestrator import CoSimulation, measure_propagation_delay
from emtts.phasor import PhasorSolver
from emtts.phasors import PhasorSet, wrap_angle
from emtts.scenario import load_scenario
from helpers import BALANCED, V_LN, dense_solve, random_feeder

T_EVENT = 0.3
RMSE_SPAN = 0.5  # transient RMSE window after the event, s


def _line(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


@lru_cache(maxsize=None)
def _cosim(name, **ov):
    sc = load_scenario(f"builtin:{name}")
    if ov:
        sc = sc.with_overrides(**ov)
    return sc, CoSimulation(sc).run()


@lru_cache(maxsize=None)
def _full(name):
    sc = load_scenario(f"builtin:{name}")
    return sc, FullEmtSimulation(sc.with_overrides(testbed="full_emt")).run()


def _step_rmse(name):
    sc, a = _cosim(name)
    _, b = _full(name)
    return transient_rmse(a, b, sc.feeder.slack.v_base, T_EVENT, T_EVENT + RMSE_SPAN)


# ---------------------------------------------------------------------- 1
def test_criterion_1_steady_state_fidelity():
    sc = load_scenario("builtin:quickstart").with_overrides(duration=0.5)
    assert len(sc.feeder.buses) <= 25
    a = CoSimulation(sc).run()
    b = FullEmtSimulation(sc.with_overrides(testbed="full_emt")).run()
    rep = steady_state_report(a, b)
    dp = np.abs(rep.p_mismatch_kw).max()
    dq = np.abs(rep.q_mismatch_kvar).max()
    ok = rep.max_error <= 0.002 and rep.iqr <= 0.001 and dp <= 2.0 and dq <= 5.0
    _line(1, ok, f"max |dV| {rep.max_error:.6f} pu (<= 0.002), IQR {rep.iqr:.6f} pu (<= 0.001), "
                 f"P mismatch {dp:.3f} kW (<= 2), Q mismatch {dq:.3f} kVAr (<= 5)")


# ---------------------------------------------------------------------- 2
def test_criterion_2_load_step_ordering():
    r = [_step_rmse(f"bess_step{i}")["max"] for i in (1, 2, 3)]
    ok = r[0] <= r[1] <= r[2] and r[0] <= 0.01
    _line(2, ok, "max-phase PCC RMS-voltage RMSE, Steps I/II/III: "
                 + " / ".join(f"{x:.5f}" for x in r) + " pu (nondecreasing, Step I <= 0.01)")


# ---------------------------------------------------------------------- 3
def test_criterion_3_genset_vs_bess():
    r_bess = _step_rmse("bess_step3")["max"]
    r_gen = _step_rmse("genset_step3")["max"]
    _, a_bess = _cosim("bess_step3")
    _, a_gen = _cosim("genset_step3")
    t_b = settling_time(*a_bess.channel("freq"), T_EVENT)
    t_g = settling_time(*a_gen.channel("freq"), T_EVENT)
    ok = r_gen <= r_bess and t_g >= 10 * t_b
    _line(3, ok, f"Step III RMSE genset {r_gen:.5f} <= BESS {r_bess:.5f} pu; frequency settling genset "
                 f"{t_g:.3f} s vs BESS {t_b:.4f} s (ratio {t_g / t_b:.1f}, >= 10)")


# ---------------------------------------------------------------------- 4
def test_criterion_4_delay_bound():
    h = 100e-6
    sc = load_scenario("builtin:quickstart").with_overrides(duration=0.5, coupling_h=h)
    parts = []
    ok = True
    for H in (1e-3, 2e-3, 5e-3, 10e-3):
        d, _ = measure_propagation_delay(sc.with_overrides(coupling_H=H), n_trials=10, seed=0)
        bound = 2 * H + h
        safe = bool(np.all(d <= bound + 1e-12))
        tight = bool(d.max() >= bound - h - 1e-12)
        ok &= safe and tight
        parts.append(f"H={H * 1e3:g} ms max {d.max() * 1e3:.4f} ms (bound {bound * 1e3:.1f}{'' if tight else ', loose'})")
    _line(4, ok, "; ".join(parts))


# ---------------------------------------------------------------------- 5
def _smoothing_metrics(mode):
    sc, a = _cosim("bess_step3", coupling_mode=mode)
    t, f = a.channel("freq")
    i0 = int(np.searchsorted(t, T_EVENT))
    f_dev = float(np.max(np.abs(f[i0:] - f[i0 - 1])))
    tr, rms = pcc_rms_pu(a, sc.feeder.slack.v_base)
    v_exc = max(transient_excursion(tr, rms[p], T_EVENT) for p in "abc")
    v_dev = max(float(np.max(np.abs(rms[p][i0:] - rms[p][i0 - 1]))) for p in "abc")
    return f_dev, v_exc, v_dev


def test_criterion_5_interpolation_smoothing():
    fd, vd, vd_raw = _smoothing_metrics("direct")
    fi, vi, vi_raw = _smoothing_metrics("interpolated")
    ok = fi <= 0.8 * fd and vi <= 0.8 * vd
    _line(5, ok, f"peak |f - f_pre| direct {fd:.4f} Hz, interpolated {fi:.4f} Hz ({1 - fi / fd:.0%} lower); "
                 f"PCC voltage excursion direct {vd:.5f} pu, interpolated {vi:.5f} pu ({1 - vi / vd:.0%} lower); "
                 f"raw peak |V - V_pre| {vd_raw:.4f} / {vi_raw:.4f} pu")


# ---------------------------------------------------------------------- 6
def _inrush_ratio(rec, name):
    t, i = rec.channel(name)
    T = 1 / 60
    fired = rec.events[0][0]
    pk = np.abs(i[(t > fired) & (t <= fired + 3 * T)]).max()
    ss = np.abs(i[t > t[-1] - T]).max()
    return pk / ss


def test_criterion_6_capacitor_switching():
    T = 1 / 60
    out = {}
    for pw, name in (("peak", "cap_peak"), ("zero", "cap_zvc")):
        sc, fe = _full(name)
        vb = sc.feeder.slack.v_base
        fired = fe.events[0][0]
        out[f"fe_{pw}"] = max(peak_pu(*fe.channel(f"w_83.{p}"), vb, fired, fired + 3 * T) for p in "abc")
        _, co = _cosim(name)
        out[f"spike_{pw}"] = max(waveform_spike(*co.channel(f"v_pcc.{p}"), co.events[0][0]) for p in "abc")
        out[f"ipcc_{pw}"] = max(waveform_spike(*co.channel(f"i_pcc.{p}"), co.events[0][0]) for p in "abc")
        _, sec = _cosim(f"{name}_secondary")
        out[f"inrush_{pw}"] = max(_inrush_ratio(sec, f"i_sec_cap83.{p}") for p in "abc")
        out[f"dv83_{pw}"] = max(abs(sec.channel(f"v_83.{p}")[1][-1] - co.channel(f"v_83.{p}")[1][-1]) for p in "abc")
    a_ok = out["fe_peak"] >= 1.3 and out["fe_zero"] < out["fe_peak"]
    # inrush: first-3-cycle current peak above 1.5x the larger steady amplitude
    b_ok = max(out["spike_peak"], out["spike_zero"]) < 0.02 and max(out["ipcc_peak"], out["ipcc_zero"]) < 0.5
    c_ok = min(out["inrush_peak"], out["inrush_zero"]) > 1.5 and max(out["dv83_peak"], out["dv83_zero"]) <= 0.002
    _line(6, a_ok and b_ok and c_ok,
          f"(a) full-EMT bus-83 peak {out['fe_peak']:.3f} pu (>= 1.3), ZVC {out['fe_zero']:.3f} pu; "
          f"(b) co-sim PCC voltage spike {out['spike_peak']:.4f}/{out['spike_zero']:.4f} (< 0.02), current ratio "
          f"{1 + out['ipcc_peak']:.3f}/{1 + out['ipcc_zero']:.3f} (< 1.5, no inrush); "
          f"(c) EMT-side cap inrush ratio {out['inrush_peak']:.2f}/{out['inrush_zero']:.2f} (> 1.5), "
          f"bus-83 steady-state diff {max(out['dv83_peak'], out['dv83_zero']):.5f} pu (<= 0.002)")


# ---------------------------------------------------------------------- 7
def test_criterion_7_round_trip():
    h = 100e-6
    w0 = 2 * np.pi * 60
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        ps = PhasorSet(rng.uniform(1.0, 1e3, 3), rng.uniform(-np.pi, np.pi, 3))
        s = ReconstructionState(h, feedforward=True, ff_mode="exact")
        s.update(ps)
        win = ExtractionWindow(h)
        for k in range(180):
            th = w0 * k * h
            win.push(s.step(th, w0), th)
        out = win.extract()
        worst = max(worst, np.max(np.abs(out.mag - ps.mag) / ps.mag), np.max(np.abs(wrap_angle(out.ang - ps.ang))))
    resid = abs(w0 * h + np.angle(filter_response(w0, h)))
    ok = worst <= 1e-6 and resid <= 2e-5
    _line(7, ok, f"worst round-trip error {worst:.2e} over 1000 sets (<= 1e-6); "
                 f"feedforward residual phase {resid:.2e} rad (<= 2e-5)")


# ---------------------------------------------------------------------- 8
def _analytic_errors(h=1e-6):
    errs = {}
    # RC: 1 kohm, 1 uF, unit step
    net = EmtNetwork(h)
    n = net.node("n")
    src = net.add_source("vs", [n, -1, -1], 1e3, 0.0)
    net.add_capacitor("c", n, -1, 1e-6)
    eng = EmtEngine(net)
    eng.set_emf(src, [1.0, 0, 0])
    e = 0.0
    for _ in range(5000):
        eng.step()
        e = max(e, abs(eng.v[n] - (1 - math.exp(-eng.t / 1e-3))))
    errs["RC"] = e
    # RL: 1 ohm, 1 mH, unit step through an ideal source
    net = EmtNetwork(h)
    n = net.node("n")
    src = net.add_source("vs", [n, -1, -1], 1e-9, 0.0)
    bl = net.add_inductor("l", n, -1, 1e-3, R=1.0)
    eng = EmtEngine(net)
    eng.set_emf(src, [1.0, 0, 0])
    e = 0.0
    for _ in range(5000):
        eng.step()
        e = max(e, abs(eng.ibr[bl][0] - (1 - math.exp(-eng.t / 1e-3))))
    errs["RL"] = e
    # LC: 1 mH, 1 mF tank started with 1 A in the inductor
    net = EmtNetwork(h)
    n = net.node("n")
    bl = net.add_inductor("l", n, -1, 1e-3)
    bc = net.add_capacitor("c", n, -1, 1e-3)
    eng = EmtEngine(net)
    eng.hist[bl, 0] = 1.0
    eng.hist[bc, 0] = 1.0
    w = 1 / math.sqrt(1e-6)
    e = 0.0
    for _ in range(int(2 * 2 * math.pi / w / h)):
        eng.step()
        # i_L = cos(wt) and v = L di/dt = -sin(wt), since sqrt(L/C) = 1
        e = max(e, abs(eng.ibr[bl][0] - math.cos(w * eng.t)), abs(eng.v[n] + math.sin(w * eng.t)))
    errs["LC"] = e
    return errs


def test_criterion_8_solver_oracles():
    errs = _analytic_errors()
    worst_pf = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = from_dict(random_feeder(rng))
        vs = V_LN * BALANCED
        sol = PhasorSolver(m).solve(vs, tol=1e-14)
        ref = dense_solve(m, vs)
        for b in m.buses:
            worst_pf = max(worst_pf, np.max(np.abs(sol.node_voltage(b.id) - ref[b.id])) / b.v_base)
    ok = max(errs.values()) <= 1e-3 and worst_pf <= 1e-10
    _line(8, ok, "EMT vs analytic (unit amplitude): " + ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
                 + f" (<= 1e-3); phasor vs dense oracle over 100 feeders {worst_pf:.2e} pu (<= 1e-10)")


# ---------------------------------------------------------------------- 9
def test_criterion_9_determinism_and_cost():
    sc = load_scenario("builtin:bess_step1").with_overrides(duration=0.5)
    a1 = CoSimulation(sc).run()
    a2 = CoSimulation(sc).run()
    full = sc.with_overrides(testbed="full_emt")
    b1 = FullEmtSimulation(full).run()
    b2 = FullEmtSimulation(full).run()
    same = a1.data_equal(a2) and b1.data_equal(b2)
    cost = cost_report({"co": a1, "full": b1})
    c_co = cost["co"]["emt_step_mean_us"]
    c_fe = cost["full"]["emt_step_mean_us"]
    _line(9, same and c_co < c_fe, f"repeat runs bit-identical: {same}; mean wall per EMT step co-sim "
                                   f"{c_co:.1f} us < full-EMT {c_fe:.1f} us")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
