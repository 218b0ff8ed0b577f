"""Design space exploration.

A SweepPlan names a base machine, the parameter axes to move and the kernels
to run. run_sweep simulates every (config point, kernel) cell, normalizes the
cycle counts to the base machine and reduces each point to a geometric mean.
On top of sweep results sit the parameter classification and the comparison
of the improved machine setups.
"""
import itertools
import json
import logging
import multiprocessing as mp
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Union

import numpy as np
import pandas as pd
from kneed import KneeLocator
from scipy.stats import gmean
from tqdm.auto import tqdm

from gpudse.arch_model import (
    KB,
    PARAM_AXES,
    PRESETS,
    AreaWeights,
    GpuConfig,
    apply_override,
    area_cost,
    axis_info,
    config_from_dict,
    config_to_dict,
    get_param,
    load_config,
    preset,
    validate,
)
from gpudse.errors import (
    ConfigError,
    SimulationAbortedError,
    SweepDataError,
    UnschedulableKernelError,
    ValidationError,
    Violation,
)
from gpudse.simcore import SimOptions, simulate
from gpudse.workload import Archetype, KernelSpec, gen_archetype, read_kernel, regranularize, synthetic_suite

log = logging.getLogger(__name__)

SINGLE = "single"
CROSS = "cross"
PAIRED = "paired"
MODES = (SINGLE, CROSS, PAIRED)

DEFAULT_EPSILON = 0.02
SOFTWARE_AXES = frozenset({"smb_per_sm", "sms_per_cluster", "num_sms"})

# flag tokens of cells without a cycle count
UNSCHEDULABLE = "unschedulable"
ABORTED = "aborted"
INVALID = "invalid"

DEFAULT_GRIDS = {
    "l1_size": (16 * KB, 32 * KB, 48 * KB, 96 * KB, 192 * KB),
    "l1_assoc": (1, 2, 4, 8),
    "l2_size": (128 * KB, 256 * KB, 512 * KB, 1024 * KB, 2048 * KB),
    "l2_assoc": (1, 2, 4, 8),
    "cores_per_smb": (8, 16, 32, 64),
    "regfile": (16384, 32768, 65536, 131072),
    "shmem": (8 * KB, 16 * KB, 32 * KB, 64 * KB, 128 * KB),
    "warp_schedulers": (1, 2, 4, 8, 16),
    "smb_per_sm": (1, 2, 4),
    "sms_per_cluster": (1, 2, 4, 8),
    "num_sms": (1, 2, 4, 8, 16),
}


@dataclass(frozen=True)
class Axis:
    param: str
    values: tuple


@dataclass(frozen=True)
class SweepPlan:
    base: GpuConfig
    axes: tuple
    workloads: tuple
    mode: str = SINGLE


# A config point is the tuple of (param, value) overrides applied to the base;
# the base point itself is the empty tuple.
ConfigPoint = tuple
BASE_POINT: ConfigPoint = ()


def point_axis(point: ConfigPoint) -> str:
    return "+".join(p for p, _ in point) if point else "baseline"


def point_value(point: ConfigPoint) -> str:
    return "+".join(str(v) for _, v in point) if point else "-"


def point_config(base: GpuConfig, point: ConfigPoint) -> GpuConfig:
    config = base
    for param, value in point:
        config = apply_override(config, param, value)
    return config


def plan_points(plan: SweepPlan) -> list[ConfigPoint]:
    """Config points of a plan, base point excluded, in plan order."""
    if not plan.axes:
        return []
    match plan.mode:
        case "single":
            return [((a.param, v),) for a in plan.axes for v in a.values]
        case "cross":
            combos = itertools.product(*[a.values for a in plan.axes])
            return [tuple(zip([a.param for a in plan.axes], combo)) for combo in combos]
        case "paired":
            return [tuple(zip([a.param for a in plan.axes], combo)) for combo in zip(*[a.values for a in plan.axes])]
        case _:
            raise ConfigError(f"unknown sweep mode '{plan.mode}', expected one of {MODES}")


def validate_plan(plan: SweepPlan) -> list[Violation]:
    out = []
    if plan.mode not in MODES:
        return [Violation("mode", f"unknown sweep mode '{plan.mode}'")]
    out += [Violation(f"base.{v.path}", v.message) for v in validate(plan.base)]
    if out:
        return out
    if not plan.workloads:
        out.append(Violation("workloads", "must not be empty"))
    labels = [k.label for k in plan.workloads]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        out.append(Violation("workloads", f"duplicate labels: {', '.join(dupes)}"))
    params = [a.param for a in plan.axes]
    if len(set(params)) != len(params):
        out.append(Violation("axes", "an axis appears more than once"))
    for i, axis in enumerate(plan.axes):
        path = f"axes[{i}]"
        if axis.param not in PARAM_AXES:
            out.append(Violation(f"{path}.param", f"unknown parameter axis '{axis.param}'"))
            continue
        values = list(axis.values)
        if not values:
            out.append(Violation(f"{path}.values", "must not be empty"))
        elif plan.mode == PAIRED:
            if values != sorted(values):
                out.append(Violation(f"{path}.values", "must be non-decreasing"))
        elif values != sorted(set(values)):
            out.append(Violation(f"{path}.values", "must be unique and ascending"))
    if plan.mode == PAIRED and plan.axes:
        if len({len(a.values) for a in plan.axes}) != 1:
            out.append(Violation("axes", "paired axes must have the same number of values"))
    if out:
        return out
    points = plan_points(plan)
    if len(set(points)) != len(points):
        out.append(Violation("axes", "paired values repeat a config point"))
    for point in points:
        where = f"{point_axis(point)}={point_value(point)}"
        try:
            point_config(plan.base, point)
        except ValidationError as e:
            out += [Violation(where, str(v)) for v in e.violations]
        except ConfigError as e:
            out.append(Violation(where, str(e)))
    return out


def check_plan(plan: SweepPlan) -> SweepPlan:
    violations = validate_plan(plan)
    if violations:
        raise ValidationError("sweep plan", violations)
    return plan


@dataclass
class SweepResult:
    """Cycle counts and slowdowns of every (config point, workload) cell.

    A cell without a cycle count carries a flag instead; its slowdown is None.
    """

    base: GpuConfig
    mode: str
    axes: tuple
    workloads: tuple
    points: tuple
    cycles: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    entries: dict = field(default_factory=dict)
    baseline_cycles: dict = field(default_factory=dict)
    geomean: dict = field(default_factory=dict)

    def slowdown(self, point: ConfigPoint, workload: str) -> float | None:
        return self.entries.get((point, workload))

    def single_axis_points(self, param: str) -> list[ConfigPoint]:
        return [p for p in self.points if len(p) == 1 and p[0][0] == param]

    def points_for(self, params: tuple) -> list[ConfigPoint]:
        """Points that override exactly the given parameters, in value order."""
        found = [p for p in self.points if tuple(name for name, _ in p) == tuple(params)]
        return sorted(found, key=lambda p: tuple(v for _, v in p))

    def to_dict(self) -> dict:
        return {
            "base": config_to_dict(self.base),
            "mode": self.mode,
            "axes": [{"param": a.param, "values": list(a.values)} for a in self.axes],
            "workloads": list(self.workloads),
            "baseline_cycles": {w: self.baseline_cycles.get(w) for w in self.workloads},
            "points": [
                {
                    "point": [[p, v] for p, v in point],
                    "geomean": self.geomean.get(point),
                    "cells": [
                        {
                            "workload": w,
                            "cycles": self.cycles.get((point, w)),
                            "slowdown": self.entries.get((point, w)),
                            "flag": self.flags.get((point, w)),
                        }
                        for w in self.workloads
                    ],
                }
                for point in self.points
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepResult":
        try:
            result = cls(
                base=config_from_dict(data["base"]),
                mode=data["mode"],
                axes=tuple(Axis(a["param"], tuple(a["values"])) for a in data["axes"]),
                workloads=tuple(data["workloads"]),
                points=tuple(tuple((p, v) for p, v in entry["point"]) for entry in data["points"]),
                baseline_cycles=dict(data["baseline_cycles"]),
            )
            for entry in data["points"]:
                point = tuple((p, v) for p, v in entry["point"])
                result.geomean[point] = entry["geomean"]
                for cell in entry["cells"]:
                    key = (point, cell["workload"])
                    result.cycles[key] = cell["cycles"]
                    result.entries[key] = cell["slowdown"]
                    if cell["flag"] is not None:
                        result.flags[key] = cell["flag"]
        except (KeyError, TypeError, ValueError) as e:
            raise SweepDataError(f"malformed sweep result: {e!r}") from None
        return result

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for point in self.points:
            for w in self.workloads:
                rows.append(
                    {
                        "axis": point_axis(point),
                        "value": point_value(point),
                        "workload": w,
                        "cycles": self.cycles.get((point, w)),
                        "slowdown": self.entries.get((point, w)),
                        "flag": self.flags.get((point, w)),
                    }
                )
        return pd.DataFrame(rows, columns=["axis", "value", "workload", "cycles", "slowdown", "flag"])


def _simulate_cell(config: GpuConfig, kernel: KernelSpec, options: SimOptions):
    """Worker body: cycles of one cell, or a flag and the reason."""
    try:
        return simulate(config, kernel, options).total_cycles, None, ""
    except UnschedulableKernelError as e:
        return None, UNSCHEDULABLE, str(e)
    except SimulationAbortedError as e:
        return None, ABORTED, str(e)
    except ValidationError as e:
        return None, INVALID, str(e)


def run_cells(tasks: list, jobs: int = 1, options: SimOptions | None = None, progress: bool = False,
              desc: str = "simulating") -> list:
    """Simulate (config, kernel) pairs, in-process or on a pool of `jobs` workers.

    Results come back in task order, so the outcome does not depend on jobs.
    """
    options = options or SimOptions.from_env()
    if jobs > 1 and len(tasks) > 1:
        with mp.Pool(processes=jobs) as pool:
            pending = [pool.apply_async(_simulate_cell, args=(c, k, options)) for c, k in tasks]
            results = [r.get() for r in tqdm(pending, desc=desc, disable=not progress)]
    else:
        results = [_simulate_cell(c, k, options) for c, k in tqdm(tasks, desc=desc, disable=not progress)]
    for (config, kernel), (_, flag, message) in zip(tasks, results):
        if flag is not None:
            log.warning("%s on %s flagged %s: %s", kernel.label, config.label, flag, message)
    return [(cycles, flag) for cycles, flag, _ in results]


def _geomean(values: Iterable) -> float | None:
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(gmean(values))


def run_sweep(plan: SweepPlan, jobs: int = 1, options: SimOptions | None = None,
              progress: bool = False) -> SweepResult:
    """Simulate every point of a plan and normalize to the base machine.

    Points whose machine is identical to another (label aside) are simulated
    once, so a point equal to the base gets a slowdown of exactly 1.0.

    Parameters:
    plan: base machine, axes, mode and workloads
    jobs: worker processes; 1 runs in-process, results do not depend on it
    options: simulator options, from the environment when None
    progress: show a progress bar

    Returns:
    SweepResult with cycles and slowdowns per (point, workload) and the geomean
    slowdown per point

    Example:

    result = run_sweep(single_plan(preset("tx2"), synthetic_suite("tiny")), jobs=4)
    result.geomean[()]  # 1.0, the base point

    """
    check_plan(plan)
    points = [BASE_POINT] + [p for p in plan_points(plan) if p != BASE_POINT]
    labels = tuple(k.label for k in plan.workloads)

    configs = {}
    unique = {}
    for point in points:
        config = point_config(plan.base, point)
        key = replace(config, label="")
        configs[point] = key
        unique.setdefault(key, config)

    tasks = [(config, kernel) for config in unique.values() for kernel in plan.workloads]
    log.info("sweep over %d points (%d distinct machines) x %d workloads", len(points), len(unique), len(labels))
    outcome = dict(zip([(key, k.label) for key in unique for k in plan.workloads],
                       run_cells(tasks, jobs, options, progress, desc="sweep")))

    result = SweepResult(base=plan.base, mode=plan.mode, axes=tuple(plan.axes), workloads=labels,
                         points=tuple(points))
    for w in labels:
        result.baseline_cycles[w] = outcome[(configs[BASE_POINT], w)][0]
    for point in points:
        for w in labels:
            cycles, flag = outcome[(configs[point], w)]
            base_cycles = result.baseline_cycles[w]
            result.cycles[(point, w)] = cycles
            if flag is None and base_cycles is None:
                flag = outcome[(configs[BASE_POINT], w)][1]
            if flag is not None:
                result.flags[(point, w)] = flag
                result.entries[(point, w)] = None
            else:
                result.entries[(point, w)] = cycles / base_cycles
        result.geomean[point] = _geomean(result.entries[(point, w)] for w in labels)
    return result


@dataclass(frozen=True)
class ParamClassification:
    param: str
    category: int
    limit: Any = None
    knee: Any = None


def sweep_curve(result: SweepResult, param: str) -> list[tuple[int, float]]:
    """(value, geomean) of the single-axis points of a parameter, base value included."""
    curve = {p[0][1]: result.geomean.get(p) for p in result.single_axis_points(param)}
    base_value = get_param(result.base, param)
    if base_value not in curve:
        curve[base_value] = result.geomean.get(BASE_POINT)
    return sorted((v, g) for v, g in curve.items() if g is not None)


def knee_value(values, geomeans):
    """Knee of a decreasing slowdown curve, or None if the curve has none."""
    if len(values) < 3 or np.allclose(geomeans, geomeans[0]):
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            knee = KneeLocator(x=list(values), y=list(geomeans), curve="convex", direction="decreasing",
                               online=False).knee
        except (ValueError, IndexError):
            return None
    return None if knee is None else type(values[0])(knee)


def classify(result: SweepResult, param: str, epsilon: float = DEFAULT_EPSILON,
             sw_axes=SOFTWARE_AXES) -> ParamClassification:
    """Classify a parameter from its single-axis sweep.

    Software-limited axes are category 2. Every other axis is category 1, with
    the limit being the smallest value past which no larger value improves the
    geomean slowdown by epsilon or more (relative).

    Parameters:
    result: a single-axis sweep that includes param
    param: the axis to classify
    epsilon: smallest relative improvement that still counts
    sw_axes: axes treated as software-limited

    Returns:
    ParamClassification(param, category, limit); limit is None for category 2
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    axis_info(param)
    if param in sw_axes:
        return ParamClassification(param, 2)
    curve = sweep_curve(result, param)
    if len(curve) < 3:
        raise SweepDataError(f"classifying '{param}' needs a single-axis sweep of >= 3 values, got {len(curve)}")
    values = [v for v, _ in curve]
    geomeans = [g for _, g in curve]
    limit = values[-1]
    for i, (value, g) in enumerate(curve):
        if all((g - later) / g < epsilon for later in geomeans[i + 1:]):
            limit = value
            break
    return ParamClassification(param, 1, limit, knee_value(values, geomeans))


def classify_all(result: SweepResult, epsilon: float = DEFAULT_EPSILON,
                 sw_axes=SOFTWARE_AXES) -> list[ParamClassification]:
    if result.mode != SINGLE:
        raise SweepDataError(f"classification needs a single-axis sweep, got mode '{result.mode}'")
    return [classify(result, a.param, epsilon, sw_axes) for a in result.axes]


def default_grids(base: GpuConfig, params: Iterable[str] | None = None) -> dict[str, tuple]:
    """Default sweep values of each axis, without the ones the base machine rejects."""
    out = {}
    for param in params or DEFAULT_GRIDS:
        kept = []
        for value in DEFAULT_GRIDS[param]:
            try:
                apply_override(base, param, value)
            except ValidationError as e:
                log.warning("dropping %s=%s for %s: %s", param, value, base.label, e.violations[0])
                continue
            kept.append(value)
        out[param] = tuple(kept)
    return out


def single_plan(base: GpuConfig, workloads, params: Iterable[str] | None = None) -> SweepPlan:
    grids = default_grids(base, params)
    return SweepPlan(base, tuple(Axis(p, v) for p, v in grids.items() if v), tuple(workloads), SINGLE)


@dataclass(frozen=True)
class FigureDef:
    figure_id: str
    platform: str
    kind: str
    params: tuple
    title: str


_L1_TRIPLE = {"tx2": (16 * KB, 48 * KB, 96 * KB), "xavier": (32 * KB, 64 * KB, 128 * KB)}
_L2_TRIPLE = (128 * KB, 512 * KB, 1024 * KB)
_ASSOC_TRIPLE = (2, 4, 8)
_SM_STEPS = (1, 2, 4, 8, 16)


def _multi_axes(platform: str) -> dict[str, tuple]:
    l1 = _L1_TRIPLE[platform]
    return {
        "l1_size_assoc": (Axis("l1_assoc", _ASSOC_TRIPLE), Axis("l1_size", l1)),
        "l2_size_assoc": (Axis("l2_assoc", _ASSOC_TRIPLE), Axis("l2_size", _L2_TRIPLE)),
        "l1_l2_size": (Axis("l1_size", l1), Axis("l2_size", _L2_TRIPLE)),
        "l1_l2_assoc": (Axis("l1_assoc", _ASSOC_TRIPLE), Axis("l2_assoc", _ASSOC_TRIPLE)),
        "l1_l2_size_assoc": (
            Axis("l1_assoc", _ASSOC_TRIPLE),
            Axis("l1_size", l1),
            Axis("l2_assoc", _ASSOC_TRIPLE),
            Axis("l2_size", _L2_TRIPLE),
        ),
        "sms_32_cores": (Axis("num_sms", _SM_STEPS), Axis("cores_per_smb", (8,) * len(_SM_STEPS))),
    }


_MULTI_TITLES = {
    "l1_size_assoc": "L1 size and associativity",
    "l2_size_assoc": "L2 size and associativity",
    "l1_l2_size": "L1 and L2 size",
    "l1_l2_assoc": "L1 and L2 associativity",
    "l1_l2_size_assoc": "L1 and L2 size and associativity",
    "sms_32_cores": "SMs with 32 CUDA cores",
}


def _figures() -> dict[str, FigureDef]:
    out = {}
    layout = {"tx2": ("fig3", "fig4", list(PARAM_AXES)),
              "xavier": ("fig5", "fig6", [p for p in PARAM_AXES if p != "shmem"])}
    for platform, (single_id, multi_id, params) in layout.items():
        for letter, param in zip("abcdefghijk", params):
            fid = f"{single_id}{letter}"
            out[fid] = FigureDef(fid, platform, SINGLE, (param,), PARAM_AXES[param].title)
        for letter, (name, axes) in zip("abcdef", _multi_axes(platform).items()):
            fid = f"{multi_id}{letter}"
            out[fid] = FigureDef(fid, platform, PAIRED, tuple(a.param for a in axes), _MULTI_TITLES[name])
    out["fig8"] = FigureDef("fig8", "tx2", "setups", (), "Improved setups, TX2")
    out["fig9"] = FigureDef("fig9", "xavier", "setups", (), "Improved setups, AGX Xavier")
    return out


FIGURES = _figures()


def figure(figure_id: str) -> FigureDef:
    try:
        return FIGURES[figure_id]
    except KeyError:
        raise SweepDataError(f"unknown figure id '{figure_id}'") from None


def builtin_plans(platform: str, workloads) -> dict[str, SweepPlan]:
    """Sweeps behind the figures of a platform: 'single' plus one paired plan per multi-parameter figure."""
    base = preset(platform)
    plans = {"single": single_plan(base, workloads)}
    multi = [f for f in FIGURES.values() if f.platform == platform and f.kind == PAIRED]
    for fig, axes in zip(multi, _multi_axes(platform).values()):
        plans[fig.figure_id] = SweepPlan(base, axes, tuple(workloads), PAIRED)
    return plans


def _resolve(ref: str, root: Path) -> Path:
    path = Path(ref)
    return path if path.is_absolute() else root / path


def _plan_workloads(entries, root: Path, seed: int) -> list[KernelSpec]:
    if not isinstance(entries, list) or not entries:
        raise ConfigError("plan field 'workloads' must be a nonempty list")
    out = []
    for i, entry in enumerate(entries):
        try:
            if isinstance(entry, str):
                out.append(read_kernel(_resolve(entry, root)))
            elif isinstance(entry, dict) and "suite" in entry:
                out += synthetic_suite(entry["suite"], entry.get("seed", seed))
            elif isinstance(entry, dict) and "archetype" in entry:
                archetype = Archetype(entry["archetype"], entry.get("scale", "tiny"))
                out.append(gen_archetype(archetype, entry.get("seed", seed)))
            else:
                raise ConfigError(f"plan field 'workloads[{i}]': expected a path, an archetype or a suite")
        except ValueError as e:
            raise ConfigError(f"plan field 'workloads[{i}]': {e}") from None
    return out


def plan_from_dict(data: dict, root: Union[str, Path] = ".") -> SweepPlan:
    """Build a plan from its JSON tree; relative paths are taken from root."""
    root = Path(root)
    if not isinstance(data, dict):
        raise ConfigError("sweep plan must be an object")
    unknown = sorted(set(data) - {"base", "mode", "axes", "workloads", "seed"})
    if unknown:
        raise ConfigError(f"sweep plan: unknown field(s) {', '.join(unknown)}")
    if "base" not in data:
        raise ConfigError("sweep plan: missing field 'base'")
    base_ref = data["base"]
    if isinstance(base_ref, dict):
        base = config_from_dict(base_ref)
    elif isinstance(base_ref, str):
        base = load_config(base_ref if base_ref in PRESETS else str(_resolve(base_ref, root)))
    else:
        raise ConfigError("plan field 'base': expected a preset name, a path or a config object")
    seed = data.get("seed", 1)
    workloads = _plan_workloads(data.get("workloads"), root, seed)
    mode = data.get("mode", SINGLE)
    axes = data.get("axes", [])
    if axes == "default":
        if mode != SINGLE:
            raise ConfigError("plan field 'axes': the default grids can only be swept in single mode")
        return single_plan(base, workloads)
    if not isinstance(axes, list):
        raise ConfigError("plan field 'axes': expected a list or \"default\"")
    parsed = []
    for i, axis in enumerate(axes):
        if not isinstance(axis, dict) or set(axis) != {"param", "values"} or not isinstance(axis["values"], list):
            raise ConfigError(f"plan field 'axes[{i}]': expected {{\"param\": ..., \"values\": [...]}}")
        parsed.append(Axis(axis["param"], tuple(axis["values"])))
    return SweepPlan(base, tuple(parsed), tuple(workloads), mode)


def read_plan(fname: Union[str, Path]) -> SweepPlan:
    fname = Path(fname)
    try:
        data = json.loads(fname.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{fname}:{e.lineno}: {e.msg}") from None
    return plan_from_dict(data, fname.parent)


@dataclass(frozen=True)
class ImprovedSetup:
    name: str
    platform: str
    config: GpuConfig


SETUP_NAMES = ("reduced_die", "increased_perf_a", "increased_perf_b")

SETUP_CHANGES = {
    "tx2": {
        "reduced_die": {"warp_schedulers": 2, "regfile": 32768, "shmem": 16 * KB},
        "increased_perf_a": {"num_sms": 4, "l1_size": 96 * KB, "l2_size": 256 * KB},
        "increased_perf_b": {"num_sms": 4, "l1_size": 96 * KB, "l2_size": 128 * KB},
    },
    "xavier": {
        "reduced_die": {"warp_schedulers": 2, "regfile": 32768},
        "increased_perf_a": {"num_sms": 16, "l1_size": 256 * KB, "l2_size": 256 * KB},
        "increased_perf_b": {"num_sms": 16, "l1_size": 256 * KB, "l2_size": 128 * KB},
    },
}


def improved_setups(platform: str) -> list[ImprovedSetup]:
    """The reduced-die and the two increased-performance machines of a platform."""
    base = preset(platform)
    out = []
    for name in SETUP_NAMES:
        config = base
        for param, value in SETUP_CHANGES[platform][name].items():
            config = apply_override(config, param, value)
        out.append(ImprovedSetup(name, platform, replace(config, label=f"{platform}-{name}")))
    return out


@dataclass(frozen=True)
class SetupRow:
    name: str
    config: GpuConfig
    cycles: dict
    slowdown: dict
    geomean: float | None
    area_units: float
    area_delta: float

    @property
    def area_ratio(self) -> float:
        return self.area_units / (self.area_units - self.area_delta)


@dataclass(frozen=True)
class SetupComparison:
    platform: str
    workloads: tuple
    rows: tuple
    flags: dict = field(default_factory=dict)

    def row(self, name: str) -> SetupRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _compare(platform: str, machines: list, workloads, weights: AreaWeights, jobs: int,
             options: SimOptions | None, progress: bool) -> SetupComparison:
    """machines: (name, config, kernels) triples; the first one is the reference.

    Columns are keyed by the labels of the reference kernels, so a machine may
    run transformed kernels in the same column.
    """
    labels = tuple(k.label for k in workloads)
    tasks = [(config, kernel) for _, config, kernels in machines for kernel in kernels]
    outcome = iter(run_cells(tasks, jobs, options, progress, desc="setups"))
    base_area = area_cost(machines[0][1], weights).total_units
    rows = []
    flags = {}
    reference = None
    for name, config, kernels in machines:
        cycles = {}
        for w, _ in zip(labels, kernels):
            c, flag = next(outcome)
            cycles[w] = c
            if flag is not None:
                flags[(name, w)] = flag
        if reference is None:
            reference = cycles
        slowdown = {
            w: (cycles[w] / reference[w] if cycles[w] is not None and reference[w] is not None else None)
            for w in labels
        }
        units = area_cost(config, weights).total_units
        rows.append(SetupRow(name, config, cycles, slowdown, _geomean(slowdown.values()), units, units - base_area))
    return SetupComparison(platform, labels, tuple(rows), flags)


def compare_setups(platform: str, workloads, weights: AreaWeights = AreaWeights(), jobs: int = 1,
                   options: SimOptions | None = None, progress: bool = False) -> SetupComparison:
    """Baseline and the three improved setups, normalized to the baseline per workload.

    Parameters:
    platform: 'tx2' or 'xavier'
    workloads: kernels to run on every machine
    weights: area coefficients for the area column

    Returns:
    SetupComparison with one row per machine, baseline first
    """
    workloads = list(workloads)
    if not workloads:
        raise ConfigError("compare_setups needs at least one workload")
    machines = [("baseline", preset(platform), workloads)]
    machines += [(s.name, s.config, workloads) for s in improved_setups(platform)]
    return _compare(platform, machines, workloads, weights, jobs, options, progress)


WIDE_L1 = 364 * KB
WIDE_L2 = 2048 * KB


def _regranularized(workloads, threads_per_block: int) -> list[KernelSpec]:
    out = []
    for kernel in workloads:
        try:
            out.append(regranularize(kernel, threads_per_block))
        except ValidationError as e:
            log.warning("keeping %s as is: %s", kernel.label, e.violations[0])
            out.append(kernel)
    return out


def software_change_study(workloads, threads_per_block: int = 64, weights: AreaWeights = AreaWeights(),
                          jobs: int = 1, options: SimOptions | None = None,
                          progress: bool = False) -> SetupComparison:
    """Wide 16-SM machines with and without finer-grained kernels, against the TX2.

    Both wide machines carry a 364KB L1 and a 2048KB L2; one keeps 128 CUDA
    cores per SM, the other has 32.
    """
    workloads = list(workloads)
    if not workloads:
        raise ConfigError("software_change_study needs at least one workload")
    reference = preset("tx2")
    wide = point_config(reference, (("num_sms", 16), ("l1_size", WIDE_L1), ("l2_size", WIDE_L2)))
    narrow = apply_override(wide, "cores_per_smb", 8)
    finer = _regranularized(workloads, threads_per_block)
    machines = [
        ("reference", reference, workloads),
        ("wide_128", replace(wide, label="wide_128"), workloads),
        (f"wide_128/tpb{threads_per_block}", replace(wide, label="wide_128"), finer),
        ("wide_32", replace(narrow, label="wide_32"), workloads),
        (f"wide_32/tpb{threads_per_block}", replace(narrow, label="wide_32"), finer),
    ]
    return _compare("tx2", machines, workloads, weights, jobs, options, progress)


def _benefit(result: SweepResult, param: str) -> float:
    """Best relative improvement of any value above the base value."""
    base_value = get_param(result.base, param)
    better = [g for v, g in sweep_curve(result, param) if v > base_value]
    return max((1.0 - g for g in better), default=0.0)


def suggest_software_axes(base: GpuConfig, workloads, threads_per_block: int = 64,
                          params: Iterable[str] | None = None, epsilon: float = DEFAULT_EPSILON,
                          jobs: int = 1, options: SimOptions | None = None,
                          progress: bool = False) -> set[str]:
    """Axes whose enlargement only pays off once the kernels are regranularized."""
    workloads = list(workloads)
    params = list(params or DEFAULT_GRIDS)
    original = run_sweep(single_plan(base, workloads, params), jobs, options, progress)
    finer = run_sweep(single_plan(base, _regranularized(workloads, threads_per_block), params),
                      jobs, options, progress)
    out = set()
    for axis in original.axes:
        before = _benefit(original, axis.param)
        after = _benefit(finer, axis.param)
        log.info("%s: benefit %.4f as is, %.4f regranularized", axis.param, before, after)
        if before < epsilon <= after:
            out.add(axis.param)
    return out

