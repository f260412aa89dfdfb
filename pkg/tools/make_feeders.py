"""Regenerate the bundled feeder files in src/emtts/data from the published
IEEE 123-node test feeder tables (line configurations, segments, spot loads,
capacitors, regulator settings).

Run: python tools/make_feeders.py
"""
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "emtts" / "data"

# three-phase overhead: self terms per conductor position, mutuals per position pair (ohm/mile, uS/mile)
POS_Z = {1: 0.4576 + 1.0780j, 2: 0.4666 + 1.0482j, 3: 0.4615 + 1.0651j}
MUT_Z = {(1, 2): 0.1560 + 0.5017j, (2, 3): 0.1580 + 0.4236j, (1, 3): 0.1535 + 0.3849j}
POS_B = {1: 5.6765, 2: 5.9809, 3: 5.3971}
MUT_B = {(1, 2): -1.8319, (2, 3): -1.1645, (1, 3): -0.6982}
# phase -> conductor position for configurations 1..6
POSITIONS = {
    1: (1, 2, 3), 2: (2, 3, 1), 3: (3, 1, 2), 4: (3, 2, 1), 5: (2, 1, 3), 6: (1, 3, 2),
}


def three_phase(cfg):
    pos = POSITIONS[cfg]
    z = np.zeros((3, 3), complex)
    b = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i == j:
                z[i, j] = POS_Z[pos[i]]
                b[i, j] = POS_B[pos[i]]
            else:
                key = tuple(sorted((pos[i], pos[j])))
                z[i, j] = MUT_Z[key]
                b[i, j] = MUT_B[key]
    return z, b


def two_phase(ph):
    idx = ["abc".index(p) for p in ph]
    z = np.zeros((3, 3), complex)
    b = np.zeros((3, 3))
    z[idx[0], idx[0]] = 0.4576 + 1.0780j
    z[idx[1], idx[1]] = 0.4615 + 1.0651j
    z[idx[0], idx[1]] = z[idx[1], idx[0]] = 0.1535 + 0.3849j
    b[idx[0], idx[0]] = 5.1154
    b[idx[1], idx[1]] = 5.1704
    b[idx[0], idx[1]] = b[idx[1], idx[0]] = -1.0549
    return z, b


def one_phase(p):
    i = "abc".index(p)
    z = np.zeros((3, 3), complex)
    b = np.zeros((3, 3))
    z[i, i] = 1.3292 + 1.3475j
    b[i, i] = 4.5193
    return z, b


def underground():
    z = np.array([[1.5209 + 0.7521j, 0.5198 + 0.2775j, 0.4924 + 0.2157j],
                  [0.5198 + 0.2775j, 1.5329 + 0.7162j, 0.5198 + 0.2775j],
                  [0.4924 + 0.2157j, 0.5198 + 0.2775j, 1.5209 + 0.7521j]])
    return z, np.eye(3) * 67.2242


CONFIGS = {k: (three_phase(k), "abc") for k in range(1, 7)}
CONFIGS[7] = (two_phase("ac"), "ac")
CONFIGS[8] = (two_phase("ab"), "ab")
CONFIGS[9] = (one_phase("a"), "a")
CONFIGS[10] = (one_phase("b"), "b")
CONFIGS[11] = (one_phase("c"), "c")
CONFIGS[12] = (underground(), "abc")

SEGMENTS = """
1 2 175 10; 1 3 250 11; 1 7 300 1; 3 4 200 11; 3 5 325 11; 5 6 250 11; 7 8 200 1;
8 12 225 10; 8 9 225 9; 8 13 300 1; 9 14 425 9; 13 34 150 11; 13 18 825 2; 14 11 250 9;
14 10 250 9; 15 16 375 11; 15 17 350 11; 18 19 250 9; 18 21 300 2; 19 20 325 9;
21 22 525 10; 21 23 250 2; 23 24 550 11; 23 25 275 2; 25 26 350 7; 25 28 200 2;
26 27 275 7; 26 31 225 11; 27 33 500 9; 28 29 300 2; 29 30 350 2; 30 250 200 2;
31 32 300 11; 34 15 100 11; 35 36 650 8; 35 40 250 1; 36 37 300 9; 36 38 250 10;
38 39 325 10; 40 41 325 11; 40 42 250 1; 42 43 500 10; 42 44 200 1; 44 45 200 9;
44 47 250 1; 45 46 300 9; 47 48 150 4; 47 49 250 4; 49 50 250 4; 50 51 250 4;
51 151 500 4; 52 53 200 1; 53 54 125 1; 54 55 275 1; 54 57 350 3; 55 56 275 1;
57 58 250 10; 57 60 750 3; 58 59 250 10; 60 61 550 5; 60 62 250 12; 62 63 175 12;
63 64 350 12; 64 65 425 12; 65 66 325 12; 67 68 200 9; 67 72 275 3; 67 97 250 3;
68 69 275 9; 69 70 325 9; 70 71 275 9; 72 73 275 11; 72 76 200 3; 73 74 350 11;
74 75 400 11; 76 77 400 6; 76 86 700 3; 77 78 100 6; 78 79 225 6; 78 80 475 6;
80 81 475 6; 81 82 250 6; 81 84 675 11; 82 83 250 6; 84 85 475 11; 86 87 450 6;
87 88 175 9; 87 89 275 6; 89 90 225 10; 89 91 225 6; 91 92 300 11; 91 93 225 6;
93 94 275 9; 93 95 300 6; 95 96 200 10; 97 98 275 3; 98 99 550 3; 99 100 300 3;
100 450 800 3; 101 102 225 11; 101 105 275 3; 102 103 325 11; 103 104 700 11;
105 106 225 10; 105 108 325 3; 106 107 575 10; 108 109 450 9; 108 300 1000 3;
109 110 300 9; 110 111 575 9; 110 112 125 9; 112 113 525 9; 113 114 325 9;
135 35 375 4; 149 1 400 1; 152 52 400 1; 160 67 350 6; 197 101 250 3
"""
CLOSED_SWITCHES = [("150", "149"), ("13", "152"), ("18", "135"), ("60", "160"), ("97", "197")]

# bus, connection, model, phases, (P, Q) per listed phase; delta loads are placed wye on the same phases
LOADS = """
1 Y PQ a 40 20; 2 Y PQ b 20 10; 4 Y PQ c 40 20; 5 Y I c 20 10; 6 Y Z c 40 20; 7 Y PQ a 20 10;
9 Y PQ a 40 20; 10 Y I a 20 10; 11 Y Z a 40 20; 12 Y PQ b 20 10; 16 Y PQ c 40 20; 17 Y PQ c 20 10;
19 Y PQ a 40 20; 20 Y I a 40 20; 22 Y Z b 40 20; 24 Y PQ c 40 20; 28 Y I a 40 20; 29 Y Z a 40 20;
30 Y PQ c 40 20; 31 Y PQ c 20 10; 32 Y PQ c 20 10; 33 Y I a 40 20; 34 Y Z c 40 20; 35 D PQ a 40 20;
37 Y Z a 40 20; 38 Y I b 20 10; 39 Y PQ b 20 10; 41 Y PQ c 20 10; 42 Y PQ a 20 10; 43 Y Z b 40 20;
45 Y I a 20 10; 46 Y PQ a 20 10; 47 Y I abc 35 25 35 25 35 25; 48 Y Z abc 70 50 70 50 70 50;
49 Y PQ abc 35 25 70 50 35 20; 50 Y PQ c 40 20; 51 Y PQ a 20 10; 52 Y PQ a 40 20; 53 Y PQ a 40 20;
55 Y Z a 20 10; 56 Y PQ b 20 10; 58 Y I b 20 10; 59 Y PQ b 20 10; 60 Y PQ a 20 10; 62 Y Z c 40 20;
63 Y PQ a 40 20; 64 Y I b 75 35; 65 D Z abc 35 25 35 25 70 50; 66 Y PQ c 75 35; 68 Y PQ a 20 10;
69 Y PQ a 40 20; 70 Y PQ a 20 10; 71 Y PQ a 40 20; 73 Y PQ c 40 20; 74 Y Z c 40 20; 75 Y PQ c 40 20;
76 D I abc 105 80 70 50 70 50; 77 Y PQ b 40 20; 79 Y Z a 40 20; 80 Y PQ b 40 20; 82 Y PQ a 40 20;
83 Y PQ c 20 10; 84 Y PQ c 20 10; 85 Y PQ c 40 20; 86 Y PQ b 20 10; 87 Y PQ b 40 20; 88 Y PQ a 40 20;
90 Y I b 40 20; 92 Y PQ c 40 20; 94 Y PQ a 40 20; 95 Y PQ b 20 10; 96 Y PQ b 20 10; 98 Y PQ a 40 20;
99 Y PQ b 40 20; 100 Y Z c 40 20; 102 Y PQ c 20 10; 103 Y PQ c 40 20; 104 Y PQ c 40 20;
106 Y PQ b 40 20; 107 Y PQ b 40 20; 109 Y PQ a 40 20; 111 Y PQ a 20 10; 112 Y I a 20 10;
113 Y Z a 40 20; 114 Y PQ a 20 10
"""
ZIP = {"PQ": [0.0, 0.0, 1.0], "I": [0.0, 1.0, 0.0], "Z": [1.0, 0.0, 0.0]}
CAPS = [("cap83", "83", "abc", [200, 200, 200]), ("cap88", "88", "a", [50]),
        ("cap90", "90", "b", [50]), ("cap92", "92", "c", [50])]
REGULATORS = [("reg1", ("150", "149"), [7, 7, 7]), ("reg2", ("9", "14"), [-1, 0, 0]),
              ("reg3", ("25", "26"), [0, 0, -1]), ("reg4", ("160", "67"), [8, 1, 5])]


def mat(m, re, im):
    return {re: np.round(np.real(m), 6).tolist(), im: np.round(np.imag(m), 6).tolist()}


def linecodes():
    out = {}
    for k, ((z, b), _) in CONFIGS.items():
        out[str(k)] = {"z_per_mile": mat(z, "r", "x"), "y_per_mile": {"b": (b * 1e-6).tolist()}}
    return out


def build():
    branches = []
    for item in SEGMENTS.split(";"):
        f, t, length, cfg = item.split()
        branches.append({"id": f"L{f}-{t}", "from": f, "to": t, "phases": CONFIGS[int(cfg)][1],
                         "linecode": cfg, "length": float(length), "length_unit": "ft"})
    for f, t in CLOSED_SWITCHES:
        branches.append({"id": f"SW{f}-{t}", "from": f, "to": t, "phases": "abc",
                         "z": {"r": (np.eye(3) * 1e-3).tolist(), "x": np.zeros((3, 3)).tolist()}})
    phases = {"150": "abc"}
    for br in branches:
        phases[br["to"]] = br["phases"]
    buses = [{"id": b, "kv": 4.16, "phases": p} for b, p in sorted(phases.items(), key=lambda kv: int(kv[0]))]
    loads = []
    for item in LOADS.split(";"):
        parts = item.split()
        bus, conn, model, ph = parts[:4]
        vals = [float(x) for x in parts[4:]]
        p = vals[0::2]
        q = vals[1::2]
        loads.append({"id": f"S{bus}", "bus": bus, "phases": ph, "p_kw": p, "q_kvar": q,
                      "zip_p": ZIP[model], "zip_q": ZIP[model]})
    caps = [{"id": cid, "bus": b, "phases": ph, "kvar": kv, "closed": True} for cid, b, ph, kv in CAPS]
    regs = []
    for rid, (f, t), taps in REGULATORS:
        brid = next(br["id"] for br in branches if br["from"] == f and br["to"] == t)
        regs.append({"id": rid, "branch": brid, "taps": taps})
    return {"name": "ieee123", "slack": "150", "linecodes": linecodes(), "buses": buses,
            "branches": branches, "loads": loads, "shunt_caps": caps, "regulators": regs}


DESK_BUSES = ["150", "149", "1", "2", "7", "8", "12", "13", "152", "52", "53", "54", "57", "60",
              "160", "67", "72", "76", "77", "78", "80", "81", "82", "83"]


def desk(full):
    keep = set(DESK_BUSES)
    out = dict(full)
    out["name"] = "desk24"
    out["buses"] = [b for b in full["buses"] if b["id"] in keep]
    out["branches"] = [br for br in full["branches"] if br["from"] in keep and br["to"] in keep]
    ids = {br["id"] for br in out["branches"]}
    out["loads"] = [ld for ld in full["loads"] if ld["bus"] in keep]
    out["shunt_caps"] = [c for c in full["shunt_caps"] if c["bus"] in keep]
    # the reduced feeder carries a fraction of the load, so the taps sit at neutral
    out["regulators"] = [dict(r, taps=[0, 0, 0]) for r in full["regulators"] if r["branch"] in ids]
    return out


if __name__ == "__main__":
    full = build()
    (OUT / "ieee123.json").write_text(json.dumps(full, indent=1))
    (OUT / "desk24.json").write_text(json.dumps(desk(full), indent=1))
    print(len(full["buses"]), "buses,", len(full["loads"]), "loads,",
          sum(sum(ld["p_kw"]) for ld in full["loads"]), "kW")
