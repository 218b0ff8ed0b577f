"""GPU machine description.

The GpuConfig tree is the state vector of the design space exploration: every
sweep point is the base preset with one or more fields overridden. All types are
frozen dataclasses, so a config can be handed to worker processes as is.
"""
import json
import logging
import re
from dataclasses import MISSING, asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, NamedTuple, Union

from gpudse.errors import ConfigError, ValidationError, Violation

log = logging.getLogger(__name__)

KB = 1024
WARP_SIZE = 32


@dataclass(frozen=True)
class CacheGeometry:
    size_bytes: int
    associativity: int
    line_bytes: int = 64
    hit_latency: int = 28

    @property
    def num_sets(self) -> int:
        return self.size_bytes // (self.associativity * self.line_bytes)


@dataclass(frozen=True)
class SmConfig:
    smb_per_sm: int
    cores_per_smb: int
    warp_schedulers: int
    regfile_regs: int
    shmem_bytes: int
    max_threads: int
    max_blocks: int
    max_warps: int
    l1: CacheGeometry

    @property
    def cuda_cores(self) -> int:
        return self.smb_per_sm * self.cores_per_smb


@dataclass(frozen=True)
class DramConfig:
    bandwidth_bytes_per_cycle: float
    latency_cycles: int = 220
    l2_banks: int = 16
    channels: int = 1


@dataclass(frozen=True)
class GpuConfig:
    num_sms: int
    sms_per_cluster: int
    sm: SmConfig
    l2: CacheGeometry
    dram: DramConfig
    clock_ghz: float
    label: str = ""

    @property
    def num_clusters(self) -> int:
        return self.num_sms // self.sms_per_cluster

    @property
    def total_cuda_cores(self) -> int:
        return self.num_sms * self.sm.cuda_cores


@dataclass(frozen=True)
class AreaWeights:
    """Linear area coefficients; SRAM is counted at one unit per byte."""

    cuda_core: float = 256.0
    regfile_byte: float = 1.0
    shmem_byte: float = 1.0
    l1_byte: float = 1.0
    l2_byte: float = 1.0
    scheduler: float = 512.0
    sm_fixed: float = 4096.0


@dataclass(frozen=True)
class AreaCost:
    total_units: float
    per_component: dict


class AxisInfo(NamedTuple):
    path: tuple
    is_bytes: bool
    title: str


# Sweepable parameters and where they live in the GpuConfig tree.
PARAM_AXES: dict[str, AxisInfo] = {
    "l1_size": AxisInfo(("sm", "l1", "size_bytes"), True, "L1 size"),
    "l1_assoc": AxisInfo(("sm", "l1", "associativity"), False, "L1 associativity"),
    "l2_size": AxisInfo(("l2", "size_bytes"), True, "L2 size"),
    "l2_assoc": AxisInfo(("l2", "associativity"), False, "L2 associativity"),
    "cores_per_smb": AxisInfo(("sm", "cores_per_smb"), False, "CUDA cores per SMB"),
    "regfile": AxisInfo(("sm", "regfile_regs"), False, "Register file (registers)"),
    "shmem": AxisInfo(("sm", "shmem_bytes"), True, "Shared memory size"),
    "warp_schedulers": AxisInfo(("sm", "warp_schedulers"), False, "Warp schedulers"),
    "smb_per_sm": AxisInfo(("sm", "smb_per_sm"), False, "SMB per SM"),
    "sms_per_cluster": AxisInfo(("sms_per_cluster",), False, "SM per cluster"),
    "num_sms": AxisInfo(("num_sms",), False, "Number of SMs"),
}


def gbps_to_bytes_per_cycle(gbps: float, clock_ghz: float) -> float:
    return gbps / clock_ghz


def _tx2() -> GpuConfig:
    return GpuConfig(
        num_sms=2,
        sms_per_cluster=1,
        sm=SmConfig(
            smb_per_sm=4,
            cores_per_smb=32,
            warp_schedulers=4,
            regfile_regs=65536,
            shmem_bytes=64 * KB,
            max_threads=2048,
            max_blocks=32,
            max_warps=64,
            l1=CacheGeometry(size_bytes=48 * KB, associativity=4, line_bytes=64, hit_latency=28),
        ),
        l2=CacheGeometry(size_bytes=512 * KB, associativity=4, line_bytes=64, hit_latency=120),
        dram=DramConfig(
            bandwidth_bytes_per_cycle=gbps_to_bytes_per_cycle(59.7, 1.1),
            latency_cycles=220,
            l2_banks=16,
        ),
        clock_ghz=1.1,
        label="tx2",
    )


def _xavier() -> GpuConfig:
    # shared memory size is not published for this part; carried over from the TX2
    return GpuConfig(
        num_sms=8,
        sms_per_cluster=1,
        sm=SmConfig(
            smb_per_sm=4,
            cores_per_smb=16,
            warp_schedulers=4,
            regfile_regs=65536,
            shmem_bytes=64 * KB,
            max_threads=2048,
            max_blocks=32,
            max_warps=64,
            l1=CacheGeometry(size_bytes=64 * KB, associativity=4, line_bytes=64, hit_latency=28),
        ),
        l2=CacheGeometry(size_bytes=512 * KB, associativity=4, line_bytes=64, hit_latency=120),
        dram=DramConfig(
            bandwidth_bytes_per_cycle=gbps_to_bytes_per_cycle(137.0, 1.37),
            latency_cycles=220,
            l2_banks=16,
        ),
        clock_ghz=1.37,
        label="xavier",
    )


PRESETS = {"tx2": _tx2(), "xavier": _xavier()}


def platforms() -> list[str]:
    return sorted(PRESETS)


def preset(name: str) -> GpuConfig:
    """Return the baseline machine for a platform identifier ('tx2' or 'xavier')."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset '{name}', expected one of: {', '.join(platforms())}") from None


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_cache(geom: CacheGeometry, path: str) -> list[Violation]:
    out = []
    if geom.associativity < 1:
        out.append(Violation(f"{path}.associativity", f"must be >= 1, got {geom.associativity}"))
    if not _is_pow2(geom.line_bytes):
        out.append(Violation(f"{path}.line_bytes", f"must be a power of two, got {geom.line_bytes}"))
    if geom.size_bytes < 1:
        out.append(Violation(f"{path}.size_bytes", f"must be >= 1, got {geom.size_bytes}"))
    if geom.hit_latency < 1:
        out.append(Violation(f"{path}.hit_latency", f"must be >= 1, got {geom.hit_latency}"))
    if geom.associativity >= 1 and geom.line_bytes >= 1 and geom.size_bytes >= 1:
        way_bytes = geom.associativity * geom.line_bytes
        if geom.size_bytes % way_bytes != 0 or geom.size_bytes < way_bytes:
            out.append(
                Violation(
                    f"{path}.size_bytes",
                    f"{geom.size_bytes} is not a whole number (>= 1) of sets of "
                    f"{geom.associativity} x {geom.line_bytes}B",
                )
            )
    return out


def validate(config: GpuConfig) -> list[Violation]:
    """List every violated invariant of a machine description; empty means valid.

    Parameters:
    config: the machine description to check

    Returns:
    list of Violation(path, message), one per broken rule, in field order

    Example:

    bad = replace(preset("tx2"), num_sms=3, sms_per_cluster=2)
    [v.path for v in validate(bad)]  # ['sms_per_cluster']

    """
    out = []
    sm = config.sm
    for name in ("smb_per_sm", "cores_per_smb", "warp_schedulers", "regfile_regs",
                 "max_threads", "max_blocks", "max_warps"):
        value = getattr(sm, name)
        if value < 1:
            out.append(Violation(f"sm.{name}", f"must be >= 1, got {value}"))
    if sm.shmem_bytes < 0:
        out.append(Violation("sm.shmem_bytes", f"must be >= 0, got {sm.shmem_bytes}"))
    if sm.max_threads // WARP_SIZE > sm.max_warps:
        out.append(
            Violation("sm.max_warps", f"{sm.max_warps} warps cannot hold max_threads={sm.max_threads}")
        )
    if sm.warp_schedulers > sm.smb_per_sm * 4:
        out.append(
            Violation(
                "sm.warp_schedulers",
                f"{sm.warp_schedulers} exceeds 4 per SMB ({sm.smb_per_sm} SMBs)",
            )
        )
    out += _check_cache(sm.l1, "sm.l1")
    out += _check_cache(config.l2, "l2")

    dram = config.dram
    if not dram.bandwidth_bytes_per_cycle > 0:
        out.append(Violation("dram.bandwidth_bytes_per_cycle", "must be > 0"))
    if dram.latency_cycles < 1:
        out.append(Violation("dram.latency_cycles", f"must be >= 1, got {dram.latency_cycles}"))
    if not _is_pow2(dram.l2_banks):
        out.append(Violation("dram.l2_banks", f"must be a power of two >= 1, got {dram.l2_banks}"))
    if dram.channels < 1:
        out.append(Violation("dram.channels", f"must be >= 1, got {dram.channels}"))

    if config.num_sms < 1:
        out.append(Violation("num_sms", f"must be >= 1, got {config.num_sms}"))
    if config.sms_per_cluster < 1:
        out.append(Violation("sms_per_cluster", f"must be >= 1, got {config.sms_per_cluster}"))
    elif config.num_sms % config.sms_per_cluster != 0:
        out.append(
            Violation(
                "sms_per_cluster",
                f"num_sms={config.num_sms} is not divisible into clusters of {config.sms_per_cluster}",
            )
        )
    if config.l2.line_bytes != sm.l1.line_bytes:
        out.append(
            Violation("l2.line_bytes", f"{config.l2.line_bytes} differs from sm.l1.line_bytes={sm.l1.line_bytes}")
        )
    if not config.clock_ghz > 0:
        out.append(Violation("clock_ghz", "must be > 0"))
    return out


def check(config: GpuConfig) -> GpuConfig:
    violations = validate(config)
    if violations:
        raise ValidationError(f"config '{config.label}'", violations)
    return config


_LABEL_RE = re.compile(r"^(?P<root>[^\[]*)(\[(?P<overrides>.*)\])?$")


def _relabel(label: str, param: str, value) -> str:
    m = _LABEL_RE.match(label)
    root = m.group("root")
    overrides = {}
    if m.group("overrides"):
        for item in m.group("overrides").split(","):
            k, _, v = item.partition("=")
            overrides[k] = v
    overrides[param] = str(value)
    body = ",".join(f"{k}={overrides[k]}" for k in sorted(overrides))
    return f"{root}[{body}]"


def _replace_path(obj, path: tuple, value):
    if len(path) == 1:
        return replace(obj, **{path[0]: value})
    child = getattr(obj, path[0])
    return replace(obj, **{path[0]: _replace_path(child, path[1:], value)})


def get_param(config: GpuConfig, param: str):
    obj = config
    for name in axis_info(param).path:
        obj = getattr(obj, name)
    return obj


def axis_info(param: str) -> AxisInfo:
    try:
        return PARAM_AXES[param]
    except KeyError:
        raise ConfigError(f"unknown parameter axis '{param}'") from None


def apply_override(config: GpuConfig, param: str, value) -> GpuConfig:
    """Return a copy of config with one sweep parameter changed.

    Only the parameter and the label change. The label keeps a sorted list of the
    overrides, so applying overrides in any order gives the same config.

    Parameters:
    config: the machine to start from, left untouched
    param: a key of PARAM_AXES, e.g. 'l2_size' or 'num_sms'
    value: integer value; byte-valued axes take bytes

    Returns:
    the new GpuConfig; raises ConfigError for an unknown axis or a non-integer
    value and ValidationError if the result breaks an invariant

    Example:

    half = apply_override(preset("tx2"), "l2_size", 256 * KB)
    half.label  # 'tx2[l2_size=262144]'

    """
    info = axis_info(param)
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"value for '{param}' must be an integer, got {value!r}")
    new = _replace_path(config, info.path, value)
    new = replace(new, label=_relabel(config.label, param, value))
    violations = validate(new)
    if violations:
        raise ValidationError(f"override {param}={value}", violations)
    return new


def area_cost(config: GpuConfig, weights: AreaWeights = AreaWeights()) -> AreaCost:
    """Parametric area score: per-SM resources times num_sms plus the shared L2.

    Parameters:
    config: the machine to score
    weights: nonnegative coefficients per component, SRAM counted per byte

    Returns:
    AreaCost with the total and a per-component breakdown
    """
    negative = [f.name for f in fields(weights) if getattr(weights, f.name) < 0]
    if negative:
        raise ConfigError(f"area weights must be nonnegative: {', '.join(negative)}")
    sm = config.sm
    n = config.num_sms
    per_component = {
        "cuda_cores": n * sm.cuda_cores * weights.cuda_core,
        "regfile": n * sm.regfile_regs * 4 * weights.regfile_byte,
        "shmem": n * sm.shmem_bytes * weights.shmem_byte,
        "l1": n * sm.l1.size_bytes * weights.l1_byte,
        "schedulers": n * sm.warp_schedulers * weights.scheduler,
        "sm_fixed": n * weights.sm_fixed,
        "l2": config.l2.size_bytes * weights.l2_byte,
    }
    return AreaCost(total_units=sum(per_component.values()), per_component=per_component)


def diff_configs(a: Any, b: Any, prefix: str = "") -> list[tuple[str, Any, Any]]:
    """Field paths (label excluded) whose values differ between two configs."""
    out = []
    for f in fields(a):
        if f.name == "label":
            continue
        va, vb = getattr(a, f.name), getattr(b, f.name)
        path = f"{prefix}{f.name}"
        if is_dataclass(va):
            out += diff_configs(va, vb, prefix=f"{path}.")
        elif va != vb:
            out.append((path, va, vb))
    return out


def config_to_dict(config: GpuConfig) -> dict:
    return asdict(config)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        where = f"{path}.{name}" if path else name
        if name not in data:
            if f.default is not MISSING:
                continue
            raise ConfigError(f"{where}: missing field")
        nested = _NESTED.get((cls, name))
        value = data[name]
        if nested is not None:
            value = _build(nested, value, where)
        elif f.type in (int, "int"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
        elif f.type in (float, "float"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
            value = float(value)
        elif f.type in (str, "str") and not isinstance(value, str):
            raise ConfigError(f"{where}: expected text, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (GpuConfig, "sm"): SmConfig,
    (GpuConfig, "l2"): CacheGeometry,
    (GpuConfig, "dram"): DramConfig,
    (SmConfig, "l1"): CacheGeometry,
}


def config_from_dict(data: dict) -> GpuConfig:
    """Build and validate a GpuConfig from its key/value tree."""
    return check(_build(GpuConfig, data, ""))


def write_config(config: GpuConfig, fname: Union[str, Path]) -> None:
    Path(fname).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=False) + "\n")


def read_config(fname: Union[str, Path]) -> GpuConfig:
    text = Path(fname).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{fname}:{e.lineno}: {e.msg}") from None
    return config_from_dict(data)


def load_config(ref: str) -> GpuConfig:
    """Resolve a preset name or a config file path."""
    if ref in PRESETS:
        return preset(ref)
    return read_config(ref)


def read_weights(fname: Union[str, Path]) -> AreaWeights:
    try:
        data = json.loads(Path(fname).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{fname}:{e.lineno}: {e.msg}") from None
    weights = _build(AreaWeights, data, "weights")
    area_cost(PRESETS["tx2"], weights)  # rejects negative coefficients
    return weights
