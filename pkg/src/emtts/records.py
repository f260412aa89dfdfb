"""Run records: named channels at their native rates plus a manifest."""
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ChannelGroup:
    rate: float  # sample period, s
    time: np.ndarray
    data: dict  # name -> 1-D array, same length as time

    def __post_init__(self):
        for name, arr in self.data.items():
            if len(arr) != len(self.time):
                raise ValueError(f"channel {name!r} has {len(arr)} samples, expected {len(self.time)}")

    @property
    def names(self):
        return list(self.data)

    def __getitem__(self, name):
        return self.data[name]


@dataclass
class RunRecord:
    groups: dict  # group name -> ChannelGroup
    manifest: dict = field(default_factory=dict)
    events: list = field(default_factory=list)  # (time, description)

    def channel(self, name):
        for grp in self.groups.values():
            if name in grp.data:
                return grp.time, grp.data[name]
        raise KeyError(name)

    def group_of(self, name):
        for gname, grp in self.groups.items():
            if name in grp.data:
                return gname
        raise KeyError(name)

    def channel_names(self):
        return {g: grp.names for g, grp in self.groups.items()}

    def data_equal(self, other):
        """Bit-level equality of every channel (timing stats excluded)."""
        if self.groups.keys() != other.groups.keys():
            return False
        for g, grp in self.groups.items():
            o = other.groups[g]
            if grp.names != o.names or not np.array_equal(grp.time, o.time):
                return False
            for name in grp.names:
                if not np.array_equal(grp.data[name], o.data[name], equal_nan=True):
                    return False
        return True

    def data_hash(self):
        h = hashlib.sha256()
        for g in sorted(self.groups):
            grp = self.groups[g]
            h.update(g.encode())
            h.update(np.ascontiguousarray(grp.time).tobytes())
            for name in grp.names:
                h.update(name.encode())
                h.update(np.ascontiguousarray(grp.data[name]).tobytes())
        return h.hexdigest()

    # ----------------------------------------------------------- CSV I/O
    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for g, grp in self.groups.items():
            path = out / f"{g}.csv"
            write_csv(path, grp.time, grp.data)
            files.append(path.name)
        man = dict(self.manifest)
        man["files"] = files + ["manifest.json"]
        man["rates"] = {g: grp.rate for g, grp in self.groups.items()}
        man["events"] = [[t, d] for t, d in self.events]
        man["data_hash"] = self.data_hash()
        (out / "manifest.json").write_text(json.dumps(man, indent=1, default=_json_default))
        return files

    @classmethod
    def read(cls, run_dir):
        run_dir = Path(run_dir)
        man_path = run_dir / "manifest.json"
        if not man_path.exists():
            raise FileNotFoundError(f"no manifest.json in {run_dir}")
        man = json.loads(man_path.read_text())
        groups = {}
        for g, rate in man.get("rates", {}).items():
            t, data = read_csv(run_dir / f"{g}.csv")
            groups[g] = ChannelGroup(rate, t, data)
        events = [tuple(e) for e in man.get("events", [])]
        return cls(groups, man, events)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def write_csv(path, time, data):
    names = list(data)
    cols = np.column_stack([time] + [data[n] for n in names]) if names else np.asarray(time)[:, None]
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s"] + names)
        for row in cols:
            w.writerow([repr(float(x)) for x in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if not header or header[0] != "time_s":
        raise ValueError(f"{path}: first column must be time_s")
    arr = np.array([[float(x) for x in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(header)))
    return arr[:, 0], {name: arr[:, i + 1] for i, name in enumerate(header[1:])}
