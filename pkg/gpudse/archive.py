"""HDF5 archive of sweep results.

One group per sweep. The cell matrices are datasets of shape
(points, workloads); everything else rides along as JSON attributes.
Every operation opens and closes the file, so an archive can be appended to
by successive runs.
"""
import json
import logging
from pathlib import Path
from typing import Union

import h5py
import numpy as np
from rich.markup import escape
from rich.text import Text
from rich.tree import Tree

from gpudse.arch_model import config_from_dict, config_to_dict
from gpudse.dse import Axis, SweepResult
from gpudse.errors import SweepDataError

log = logging.getLogger(__name__)

_STR = h5py.string_dtype(encoding="utf-8")
NO_CYCLES = -1


class SweepArchive:
    def __init__(self, fname: Union[str, Path]):
        self.fname = Path(fname)

    def names(self) -> list[str]:
        if not self.fname.exists():
            return []
        with h5py.File(self.fname, "r") as f:
            return sorted(f.keys())

    def save(self, name: str, result: SweepResult, note: str = "") -> None:
        points, workloads = result.points, result.workloads
        shape = (len(points), len(workloads))
        cycles = np.full(shape, NO_CYCLES, dtype=np.int64)
        slowdown = np.full(shape, np.nan)
        flags = np.full(shape, "", dtype=object)
        for i, point in enumerate(points):
            for j, w in enumerate(workloads):
                c = result.cycles.get((point, w))
                s = result.entries.get((point, w))
                if c is not None:
                    cycles[i, j] = c
                if s is not None:
                    slowdown[i, j] = s
                flags[i, j] = result.flags.get((point, w), "")
        geomean = np.array([np.nan if result.geomean.get(p) is None else result.geomean[p] for p in points])
        baseline = np.array([NO_CYCLES if result.baseline_cycles.get(w) is None else result.baseline_cycles[w]
                             for w in workloads], dtype=np.int64)

        with h5py.File(self.fname, "a") as f:
            if name in f:
                del f[name]
            grp = f.create_group(name, track_order=True)
            grp.attrs["mode"] = result.mode
            grp.attrs["base"] = json.dumps(config_to_dict(result.base))
            grp.attrs["axes"] = json.dumps([{"param": a.param, "values": list(a.values)} for a in result.axes])
            grp.attrs["note"] = note
            grp.create_dataset("workloads", data=np.array(workloads, dtype=object), dtype=_STR, track_times=False)
            grp.create_dataset(
                "points",
                data=np.array([json.dumps([[p, v] for p, v in point]) for point in points], dtype=object),
                dtype=_STR,
                track_times=False,
            )
            grp.create_dataset("cycles", data=cycles, track_times=False)
            grp.create_dataset("slowdown", data=slowdown, track_times=False)
            grp.create_dataset("flags", data=flags, dtype=_STR, track_times=False)
            grp.create_dataset("geomean", data=geomean, track_times=False)
            grp.create_dataset("baseline_cycles", data=baseline, track_times=False)
        log.info("archived sweep '%s' in %s", name, self.fname)

    def load(self, name: str) -> SweepResult:
        try:
            with h5py.File(self.fname, "r") as f:
                grp = f[name]
                mode = str(grp.attrs["mode"])
                base = config_from_dict(json.loads(grp.attrs["base"]))
                axes = tuple(Axis(a["param"], tuple(a["values"])) for a in json.loads(grp.attrs["axes"]))
                workloads = tuple(str(w) for w in grp["workloads"].asstr()[()])
                points = tuple(
                    tuple((p, v) for p, v in json.loads(s)) for s in grp["points"].asstr()[()]
                )
                cycles = grp["cycles"][()]
                slowdown = grp["slowdown"][()]
                flags = grp["flags"].asstr()[()]
                geomean = grp["geomean"][()]
                baseline = grp["baseline_cycles"][()]
        except (KeyError, OSError) as e:
            raise SweepDataError(f"{self.fname}: cannot load sweep '{name}': {e}") from None

        result = SweepResult(base=base, mode=mode, axes=axes, workloads=workloads, points=points)
        for j, w in enumerate(workloads):
            result.baseline_cycles[w] = None if baseline[j] == NO_CYCLES else int(baseline[j])
        for i, point in enumerate(points):
            result.geomean[point] = None if np.isnan(geomean[i]) else float(geomean[i])
            for j, w in enumerate(workloads):
                key = (point, w)
                result.cycles[key] = None if cycles[i, j] == NO_CYCLES else int(cycles[i, j])
                result.entries[key] = None if np.isnan(slowdown[i, j]) else float(slowdown[i, j])
                if flags[i, j]:
                    result.flags[key] = str(flags[i, j])
        return result

    def _walk(self, node: Union[h5py.File, h5py.Group], tree: Tree) -> None:
        for key in sorted(node.keys()):
            sub = node[key]
            if isinstance(sub, h5py.Group):
                branch = tree.add(Text.from_markup(f"[bold magenta]:open_file_folder: {escape(key)}"))
                if sub.attrs.get("note"):
                    branch.add(Text.from_markup(f"[dim]note: {escape(str(sub.attrs['note']))}"))
                self._walk(sub, branch)
            elif isinstance(sub, h5py.Dataset):
                tree.add(Text.from_markup(f"[green]:page_with_curl: {escape(key)} {sub.shape} {sub.dtype}"))

    def tree(self) -> Tree:
        root = Text.from_markup(f":open_file_folder: {escape(str(self.fname))}")
        tree = Tree(root, guide_style="bold bright_blue")
        with h5py.File(self.fname, "r") as f:
            self._walk(f, tree)
        return tree
