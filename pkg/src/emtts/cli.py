"""Command line entry point: ``cosim run|delay-sweep|compare|validate``.

Exit codes: 0 success, 1 input error (bad scenario, bad flags, missing file),
2 simulation or comparison failure. Diagnostics go to standard error and
nothing is written outside ``--out``.
"""
import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (SteadyStateError, channel_rmse, cost_report, pcc_rms_pu, run_full_emt, steady_state_report,
                    transient_rmse)
from .feeder import PHASES
from .orchestrator import CoSimulation, MeasurementError, SimulationError, measure_propagation_delay
from .records import RunRecord, write_csv
from .scenario import ScenarioError, load_scenario, parse_time

EXIT_OK, EXIT_INPUT, EXIT_SIM = 0, 1, 2


class InputError(Exception):
    pass


def _err(msg):
    print(f"cosim: {msg}", file=sys.stderr)


def _times(text):
    try:
        return [parse_time(x.strip()) for x in str(text).split(",") if x.strip()]
    except (ValueError, TypeError) as e:
        raise InputError(f"bad time list {text!r}: {e}") from None


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("COSIM_SEED")
    try:
        return int(env) if env else 0
    except ValueError:
        raise InputError(f"COSIM_SEED must be an integer, got {env!r}") from None


# --------------------------------------------------------------- manifest
class Manifest:
    """Run manifest that is written even when the command fails."""

    def __init__(self, command, out, argv):
        self.out = Path(out) if out else None
        self.data = {
            "command": command,
            "artifact_version": __version__,
            "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "argv": list(argv),
            "overrides": {},
            "files": [],
            "status": "running",
            "exit_code": None,
        }

    def scenario(self, path, sc):
        self.data["scenario_path"] = str(path)
        self.data["scenario_hash"] = sc.source_hash

    def finish(self, code, status, message=""):
        self.data["exit_code"] = code
        self.data["status"] = status
        if message:
            self.data["message"] = message
        if self.out is None:
            return code
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        merged = {}
        if path.exists() and self.data["command"] == "run":
            # the run record already wrote rates, events and timing stats here
            merged = json.loads(path.read_text())
        files = sorted(set(self.data["files"]) | set(merged.get("files", [])) | {"manifest.json"})
        merged.update(self.data)
        merged["files"] = files
        path.write_text(json.dumps(merged, indent=1, default=str) + "\n")
        return code


def _load(path, man):
    try:
        sc = load_scenario(path)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    except (ScenarioError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None
    man.scenario(path, sc)
    return sc


def _overrides(args):
    """Flag values that shadow the scenario file, by override key."""
    ov = {}
    if getattr(args, "coupling_mode", None):
        ov["coupling_mode"] = args.coupling_mode
    for flag in ("h", "H", "delay"):
        val = getattr(args, flag, None)
        if val is not None:
            ov[f"coupling_{flag}"] = parse_time(val)
    if getattr(args, "no_feedforward", False):
        ov["coupling_feedforward"] = False
    if getattr(args, "duration", None) is not None:
        ov["duration"] = parse_time(args.duration)
    if getattr(args, "pacing", None):
        ov["pacing"] = args.pacing
    if getattr(args, "testbed", None):
        ov["testbed"] = args.testbed
    return ov


def _apply(sc, ov, man):
    if not ov:
        return sc
    man.data["overrides"].update(ov)
    try:
        return sc.with_overrides(**ov)
    except (ScenarioError, ValueError, TypeError) as e:
        raise InputError(f"invalid override: {e}") from None


# ------------------------------------------------------------------ run
def _simulate(sc):
    if sc.testbed == "full_emt":
        return run_full_emt(sc)
    return CoSimulation(sc).run()


def cmd_run(args, man):
    sc = _apply(_load(args.scenario, man), _overrides(args), man)
    rec = _simulate(sc)
    man.data["files"] += rec.write(man.out)
    print(f"{sc.testbed} run of {sc.duration:g} s written to {man.out}")
    return EXIT_OK


# ---------------------------------------------------------- delay sweep
def _sweep_one(sc, H, h, trials, seed):
    s = sc.with_overrides(coupling_H=H, coupling_h=h, coupling_delay=H)
    d, off = measure_propagation_delay(s, n_trials=trials, seed=seed)
    return H, d, off


def cmd_delay_sweep(args, man):
    sc = _load(args.scenario, man)
    Hs = _times(args.H)
    if not Hs:
        raise InputError("--H needs at least one value")
    h = parse_time(args.h) if args.h else sc.coupling.h
    for H in Hs:
        n = round(H / h)
        if n < 1 or abs(n * h - H) > 1e-9 * H:
            raise InputError(f"H={H:g} s is not an integer multiple of h={h:g} s")
    seed = _seed(args)
    man.data["overrides"].update({"H": Hs, "h": h, "trials": args.trials, "seed": seed})
    if args.parallel and len(Hs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(Hs), os.cpu_count() or 1)) as ex:
            results = list(ex.map(_sweep_one, [sc] * len(Hs), Hs, [h] * len(Hs), [args.trials] * len(Hs),
                                  [seed] * len(Hs)))
    else:
        results = [_sweep_one(sc, H, h, args.trials, seed) for H in Hs]
    out = man.out
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(out / "delays.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H_s", "h_s", "N", "trials", "delay_min_s", "delay_mean_s", "delay_max_s", "bound_s",
                    "within_bound", "tight"])
        for H, d, _ in results:
            bound = 2 * H + h
            ok = bool(np.all(d <= bound + 1e-12))
            tight = bool(np.any(d >= bound - h - 1e-12))
            w.writerow([repr(H), repr(h), round(H / h), len(d), repr(float(d.min())), repr(float(d.mean())),
                        repr(float(d.max())), repr(bound), ok, tight])
            rows.append((H, d.max(), bound, ok, tight))
    with open(out / "delay_trials.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H_s", "offset_s", "delay_s"])
        for H, d, off in results:
            for o, x in zip(off, d):
                w.writerow([repr(H), repr(float(o)), repr(float(x))])
    man.data["files"] += ["delays.csv", "delay_trials.csv"]
    for H, dmax, bound, ok, tight in rows:
        print(f"H={H * 1e3:g} ms: max delay {dmax * 1e3:.4f} ms, bound {bound * 1e3:.4f} ms"
              f"{'' if ok else '  EXCEEDED'}{'  (tight)' if tight else ''}")
    return EXIT_OK


# -------------------------------------------------------------- compare
class ComparisonError(Exception):
    pass


def _read_run(path):
    try:
        return RunRecord.read(path)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: unreadable run directory ({e})") from None


def _check_compatible(a, b):
    problems = []
    for g in ("emt", "phasor"):
        if g not in a.groups or g not in b.groups:
            problems.append(f"group {g!r} missing from {'A' if g not in a.groups else 'B'}")
            continue
        na, nb = set(a.groups[g].names), set(b.groups[g].names)
        if not na & nb:
            problems.append(f"group {g!r}: no shared channels (A: {sorted(na)[:6]}, B: {sorted(nb)[:6]})")
    for p in PHASES:
        name = f"v_pcc.{p}"
        for label, r in (("A", a), ("B", b)):
            if "emt" in r.groups and name not in r.groups["emt"].data:
                problems.append(f"run {label} lacks {name}")
    if not problems:
        ta, tb = a.groups["emt"].time, b.groups["emt"].time
        if min(ta[-1], tb[-1]) < max(ta[0], tb[0]):
            problems.append("time ranges do not overlap")
        if a.manifest.get("v_base") != b.manifest.get("v_base"):
            problems.append(f"voltage bases differ: {a.manifest.get('v_base')} vs {b.manifest.get('v_base')}")
    return problems


def cmd_compare(args, man):
    a = _read_run(args.run_a)
    b = _read_run(args.run_b)
    man.data["runs"] = [str(args.run_a), str(args.run_b)]
    problems = _check_compatible(a, b)
    if problems:
        raise ComparisonError("incompatible channel sets:\n  " + "\n  ".join(problems))
    t0 = parse_time(args.t0) if args.t0 is not None else None
    t1 = parse_time(args.t1) if args.t1 is not None else None
    v_base = float(a.manifest["v_base"])
    out = man.out
    out.mkdir(parents=True, exist_ok=True)
    lines = []

    # per-channel RMSE on every shared channel
    shared = [n for g in ("emt", "phasor") for n in a.groups[g].names if n in b.groups[g].data]
    per = channel_rmse(a, b, shared, t0, t1)
    with open(out / "channel_rmse.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "rmse"])
        for n in shared:
            w.writerow([n, repr(per[n])])
    # PCC one-cycle RMS voltage, per phase, max phase highlighted
    tr = transient_rmse(a, b, v_base, t0 if t0 is not None else 0.0, t1)
    with open(out / "pcc_rms_rmse.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "rmse_pu", "max_phase"])
        for p in PHASES:
            w.writerow([p, repr(tr[p]), p == tr["max_phase"]])
    lines.append("PCC RMS voltage RMSE (pu): " + " ".join(f"{p}={tr[p]:.6f}" for p in PHASES)
                 + f"  max={tr['max']:.6f} (phase {tr['max_phase']})")
    man.data["files"] += ["channel_rmse.csv", "pcc_rms_rmse.csv"]

    # plot-ready traces: PCC RMS voltage and frequency for both runs
    ta, ra = pcc_rms_pu(a, v_base)
    tb, rb = pcc_rms_pu(b, v_base)
    n = min(len(ta), len(tb))
    if np.array_equal(ta[:n], tb[:n]):
        data = {}
        for p in PHASES:
            data[f"A_v_rms.{p}"] = ra[p][:n]
            data[f"B_v_rms.{p}"] = rb[p][:n]
        data["A_freq"] = a.channel("freq")[1][:n]
        data["B_freq"] = b.channel("freq")[1][:n]
        write_csv(out / "traces.csv", ta[:n], data)
        man.data["files"].append("traces.csv")

    # steady state over the trailing cycles, if both runs settled
    try:
        rep = steady_state_report(a, b)
    except SteadyStateError as e:
        lines.append(f"steady-state report skipped: {e}")
    else:
        with open(out / "steady_state.csv", "w", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "error_pu"])
            for name, err in rep.rows():
                w.writerow([name, repr(err)])
            for p, dp, dq in zip(PHASES, rep.p_mismatch_kw, rep.q_mismatch_kvar):
                w.writerow([f"p_pcc.{p}_kw", repr(float(dp))])
                w.writerow([f"q_pcc.{p}_kvar", repr(float(dq))])
        man.data["files"].append("steady_state.csv")
        lines.append(rep.summary())
    cost = cost_report({"A": a, "B": b})
    with open(out / "cost.csv", "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "testbed", "emt_step_mean_us", "emt_step_p95_us", "phasor_step_mean_us", "emt_steps"])
        for label, row in cost.items():
            w.writerow([label, row["testbed"], repr(row["emt_step_mean_us"]), repr(row["emt_step_p95_us"]),
                        repr(row["phasor_step_mean_us"]), row["emt_steps"]])
            lines.append(f"cost {label} ({row['testbed']}): {row['emt_step_mean_us']:.2f} us per EMT step")
    man.data["files"].append("cost.csv")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    man.data["files"].append("summary.txt")
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------- validate
def cmd_validate(args, man):
    sc = _apply(_load(args.scenario, man), _overrides(args), man)
    m = sc.feeder
    print(f"ok: {m.name}, {len(m.buses)} buses, {len(sc.events)} events, {sc.duration:g} s, "
          f"h={sc.coupling.h:g} s, H={sc.coupling.H:g} s, mode {sc.coupling.mode}, testbed {sc.testbed}")
    return EXIT_OK


# ---------------------------------------------------------------- parser
def _run_flags(p):
    p.add_argument("--testbed", choices=["cosim", "full_emt"])
    p.add_argument("--coupling-mode", choices=["direct", "interpolated"])
    p.add_argument("--h", help="EMT timestep, e.g. 100us")
    p.add_argument("--H", help="phasor timestep, e.g. 1ms")
    p.add_argument("--delay", help="exchange delay per direction")
    p.add_argument("--no-feedforward", action="store_true")
    p.add_argument("--duration")
    p.add_argument("--pacing", choices=["free", "realtime"])


def build_parser():
    ap = argparse.ArgumentParser(prog="cosim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write channel CSVs")
    p.add_argument("scenario", help="scenario JSON path or builtin:<name>")
    p.add_argument("--out", required=True)
    _run_flags(p)

    p = sub.add_parser("delay-sweep", help="measure event propagation delay for several H")
    p.add_argument("scenario")
    p.add_argument("--H", required=True, help="comma-separated phasor timesteps, e.g. 1ms,10ms")
    p.add_argument("--h", help="EMT timestep (default: scenario value)")
    p.add_argument("--trials", type=int, default=10, help="POW-randomized probes per H")
    p.add_argument("--seed", type=int, help="offset randomization seed (default COSIM_SEED or 0)")
    p.add_argument("--parallel", action="store_true", help="one process per H")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="compare two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--t0", help="start of the comparison window")
    p.add_argument("--t1", help="end of the comparison window")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="parse a scenario without running it")
    p.add_argument("scenario")
    _run_flags(p)
    return ap


COMMANDS = {"run": cmd_run, "delay-sweep": cmd_delay_sweep, "compare": cmd_compare, "validate": cmd_validate}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    man = Manifest(args.command, getattr(args, "out", None), argv)
    try:
        code = COMMANDS[args.command](args, man)
    except InputError as e:
        _err(str(e))
        return man.finish(EXIT_INPUT, "input_error", str(e))
    except (SimulationError, MeasurementError, ComparisonError) as e:
        _err(str(e))
        return man.finish(EXIT_SIM, "failed", str(e))
    except ValueError as e:
        # flag values rejected by the config types
        _err(str(e))
        return man.finish(EXIT_INPUT, "input_error", str(e))
    return man.finish(code, "ok")


if __name__ == "__main__":
    sys.exit(main())
