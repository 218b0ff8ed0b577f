"""gpu-dse command line.

Exit codes: 0 success, 1 domain error (bad config, missing file, failed run),
2 usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from gpudse import __version__
from gpudse.arch_model import (
    PARAM_AXES,
    PRESETS,
    AreaWeights,
    apply_override,
    area_cost,
    load_config,
    platforms,
    read_config,
    read_weights,
    write_config,
)
from gpudse.archive import SweepArchive
from gpudse.dse import (
    DEFAULT_EPSILON,
    FIGURES,
    PAIRED,
    SINGLE,
    SOFTWARE_AXES,
    builtin_plans,
    classify_all,
    compare_setups,
    read_plan,
    run_sweep,
    software_change_study,
)
from gpudse.errors import GpuDseError, ValidationError
from gpudse.report import (
    classification_table,
    comparison_table,
    emit_csv,
    emit_figure_data,
    emit_setups_csv,
    emit_setups_figure_data,
    figure_points,
    read_sweep_json,
    sweep_summary,
    write_json,
)
from gpudse.simcore import POLICIES, SimOptions, simulate
from gpudse.workload import (
    ARCHETYPES,
    SCALES,
    Archetype,
    dynamic_instructions,
    gen_archetype,
    read_kernel,
    regranularize,
    synthetic_suite,
    write_kernel,
)

log = logging.getLogger("gpudse")

# labels carry "[param=value]" overrides, so nothing printed here is markup
console = Console(highlight=False, soft_wrap=True, markup=False)
err_console = Console(stderr=True, highlight=False, markup=False)


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: '{text}'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _override(text: str) -> tuple[str, int]:
    param, sep, value = text.partition("=")
    if not sep or param not in PARAM_AXES:
        raise argparse.ArgumentTypeError(f"expected PARAM=VALUE with PARAM one of {', '.join(PARAM_AXES)}")
    try:
        return param, int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"value of {param} must be an integer, got '{value}'") from None


def _add_workload_source(p: argparse.ArgumentParser) -> None:
    # defaults filled in by _check_usage
    p.add_argument("--scale", choices=SCALES, help="scale of the synthetic suite (default: tiny)")
    p.add_argument("--seed", type=int, help="seed of the synthetic kernels (default: 1)")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel simulations (default: 1)")
    p.add_argument("--cycle-cap", type=_positive_int, help="abort a simulation past this many cycles")
    p.add_argument("--policy", choices=POLICIES, default="oldest", help="warp scheduler policy (default: oldest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpu-dse",
        description="GPU timing simulation and design space exploration of embedded GPU configurations.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    parser.add_argument("--quiet", action="store_true", help="log errors only and hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("config", help="write, check or list machine configurations")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=platforms(), help="start from a platform preset")
    group.add_argument("--check", metavar="FILE", help="validate a config file")
    group.add_argument("--list", action="store_true", help="list presets and sweepable parameters")
    p.add_argument("--set", type=_override, action="append", default=[], metavar="PARAM=VALUE",
                   help="override a parameter of the preset (repeatable)")
    p.add_argument("--out", metavar="FILE", help="write the config as JSON")

    p = sub.add_parser("gen-workload", help="generate synthetic kernels")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--archetype", choices=ARCHETYPES, help="generate one archetype")
    group.add_argument("--suite", action="store_true", help="generate one kernel per archetype")
    _add_workload_source(p)
    p.add_argument("--threads-per-block", type=_positive_int, help="regranularize to this block size")
    p.add_argument("--out", metavar="FILE", help="kernel file (with --archetype)")
    p.add_argument("--out-dir", metavar="DIR", default=".", help="directory for --suite (default: .)")

    p = sub.add_parser("simulate", help="simulate one kernel on one machine")
    p.add_argument("--config", required=True, metavar="PRESET|FILE", help="preset name or config file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--kernel", metavar="FILE", help="kernel file")
    group.add_argument("--archetype", choices=ARCHETYPES, help="simulate a synthetic archetype")
    _add_workload_source(p)
    p.add_argument("--out", metavar="FILE", help="write the full result as JSON")
    p.add_argument("--trace", metavar="FILE", help="write every cache access to FILE")
    p.add_argument("--cycle-cap", type=_positive_int, help="abort past this many cycles")
    p.add_argument("--policy", choices=POLICIES, default="oldest", help="warp scheduler policy (default: oldest)")

    p = sub.add_parser("sweep", help="run a parameter sweep")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--plan", metavar="FILE", help="sweep plan (JSON)")
    group.add_argument("--builtin", choices=platforms(), help="run every figure sweep of a platform")
    _add_workload_source(p)
    p.add_argument("--out-dir", required=True, metavar="DIR", help="output directory")
    p.add_argument("--hdf5", metavar="FILE", help="also archive the results in an HDF5 file")
    _add_run_options(p)

    p = sub.add_parser("classify", help="classify parameters from a single-axis sweep")
    p.add_argument("--results", required=True, metavar="DIR|FILE", help="sweep JSON, HDF5 archive or sweep output directory")
    p.add_argument("--epsilon", type=_positive_float, default=DEFAULT_EPSILON,
                   help=f"relative improvement below which a larger value does not pay off (default: {DEFAULT_EPSILON})")
    p.add_argument("--sw-axes", default=",".join(sorted(SOFTWARE_AXES)), metavar="LIST",
                   help="comma-separated software-limited axes (category 2)")

    p = sub.add_parser("setups", help="compare the improved setups with the baseline")
    p.add_argument("--platform", required=True, choices=platforms())
    p.add_argument("--workloads", nargs="+", metavar="FILE", help="kernel files (default: the synthetic suite)")
    _add_workload_source(p)
    p.add_argument("--out-dir", required=True, metavar="DIR", help="output directory")
    p.add_argument("--weights", metavar="FILE", help="area weights (JSON)")
    p.add_argument("--software-study", action="store_true",
                   help="also run the wide 16-SM machines with regranularized kernels")
    p.add_argument("--threads-per-block", type=_positive_int, default=64,
                   help="block size of the regranularized kernels (default: 64)")
    _add_run_options(p)
    return parser


def _check_usage(parser: argparse.ArgumentParser, args) -> None:
    """Reject options that the chosen mode of a command would ignore, then fill in defaults."""
    suite_flags = [f"--{name}" for name in ("scale", "seed") if getattr(args, name, None) is not None]
    given = "/".join(suite_flags)
    match args.command:
        case "gen-workload" if args.suite and args.out:
            parser.error("gen-workload: --out applies to --archetype only, --suite writes into --out-dir")
        case "simulate" if args.kernel and suite_flags:
            parser.error(f"simulate: {given} only apply to --archetype")
        case "sweep" if args.plan and suite_flags:
            parser.error(f"sweep: {given} only apply to --builtin, a plan names its own workloads")
        case "setups" if args.workloads and suite_flags:
            parser.error(f"setups: {given} only apply to the synthetic suite, not to --workloads")
    if hasattr(args, "scale"):
        args.scale = args.scale or "tiny"
        args.seed = 1 if args.seed is None else args.seed


def _options(args) -> SimOptions:
    kwargs = {"scheduler_policy": args.policy}
    if args.cycle_cap is not None:
        kwargs["cycle_cap"] = args.cycle_cap
    return SimOptions.from_env(**kwargs)


def cmd_config(args) -> int:
    if args.list:
        for name in platforms():
            console.print(f"preset {name}")
        for name, info in PARAM_AXES.items():
            console.print(f"axis {name}: {info.title} ({'.'.join(info.path)})")
        return 0
    if args.check:
        config = read_config(args.check)
        console.print(f"config {args.check}: valid ({config.label or 'unlabelled'})")
        return 0
    config = load_config(args.preset)
    for param, value in args.set:
        config = apply_override(config, param, value)
    if args.out:
        write_config(config, args.out)
    console.print(
        f"config {config.label}: {config.num_sms} SMs x {config.sm.cuda_cores} CUDA cores, "
        f"L1 {config.sm.l1.size_bytes // 1024}KB, L2 {config.l2.size_bytes // 1024}KB, "
        f"area {area_cost(config).total_units:.6g}"
    )
    return 0


def cmd_gen_workload(args) -> int:
    if args.archetype:
        kernels = [gen_archetype(Archetype(args.archetype, args.scale), args.seed)]
    else:
        kernels = synthetic_suite(args.scale, args.seed)
    if args.threads_per_block:
        kernels = [regranularize(k, args.threads_per_block) for k in kernels]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for kernel in kernels:
        path = Path(args.out) if args.out else out_dir / f"{kernel.label.replace('/', '_')}.json"
        write_kernel(kernel, path)
        console.print(
            f"workload {kernel.label}: {kernel.grid_blocks} blocks x {kernel.threads_per_block} threads, "
            f"{dynamic_instructions(kernel)} warp instructions -> {path}"
        )
    return 0


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    if args.kernel:
        kernel = read_kernel(args.kernel)
    else:
        kernel = gen_archetype(Archetype(args.archetype, args.scale), args.seed)
    options = _options(args)
    if args.trace:
        with open(args.trace, "w") as trace:
            result = simulate(config, kernel, options, trace)
    else:
        result = simulate(config, kernel, options)
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    console.print(
        f"simulate {kernel.label} on {config.label}: total_cycles={result.total_cycles} "
        f"instructions={result.instructions_issued} blocks={result.blocks_executed}"
    )
    return 0


def _figures_for(result, platform: str) -> list[str]:
    out = []
    for fid, fig in FIGURES.items():
        if fig.platform != platform or fig.kind not in (SINGLE, PAIRED):
            continue
        try:
            figure_points(result, fid)
        except GpuDseError:
            continue
        out.append(fid)
    return out


def _write_sweep(name: str, result, out_dir: Path, platform: str, archive: SweepArchive | None) -> None:
    emit_csv(result, out_dir / f"{name}.csv")
    write_json(result, out_dir / f"{name}.json")
    for fid in _figures_for(result, platform):
        emit_figure_data(result, fid, out_dir / f"{fid}.dat")
    if archive is not None:
        archive.save(name, result, note=f"{result.mode} sweep of {result.base.label}")
    console.print(f"{name}: {sweep_summary(result)}")


def cmd_sweep(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    options = _options(args)
    archive = SweepArchive(args.hdf5) if args.hdf5 else None
    if args.plan:
        plan = read_plan(args.plan)
        root = plan.base.label.split("[")[0]
        platform = root if root in PRESETS else "tx2"
        plans = {"sweep": plan}
    else:
        platform = args.builtin
        plans = builtin_plans(platform, synthetic_suite(args.scale, args.seed))
    for name, plan in plans.items():
        result = run_sweep(plan, jobs=args.jobs, options=options, progress=not args.quiet)
        _write_sweep(name, result, out_dir, platform, archive)
    if archive is not None and not args.quiet:
        console.print(archive.tree())
    return 0


def _results_file(ref: str) -> Path:
    path = Path(ref)
    if path.is_dir():
        for name in ("single.json", "sweep.json"):
            if (path / name).exists():
                return path / name
        raise FileNotFoundError(f"{path}: no single.json or sweep.json")
    return path


def _load_results(ref: str):
    path = Path(ref)
    if path.suffix in (".h5", ".hdf5"):
        archive = SweepArchive(path)
        names = archive.names()
        return archive.load("single" if "single" in names or not names else names[0])
    return read_sweep_json(_results_file(ref))


def cmd_classify(args) -> int:
    result = _load_results(args.results)
    sw_axes = frozenset(a for a in args.sw_axes.split(",") if a)
    unknown = sorted(sw_axes - set(PARAM_AXES))
    if unknown:
        raise GpuDseError(f"unknown software axes: {', '.join(unknown)}")
    classes = classify_all(result, args.epsilon, sw_axes)
    console.print(classification_table(classes, args.epsilon))
    ones = sum(1 for c in classes if c.category == 1)
    console.print(f"classify: {len(classes)} axes, {ones} category 1, {len(classes) - ones} category 2")
    return 0


def cmd_setups(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.workloads:
        workloads = [read_kernel(f) for f in args.workloads]
    else:
        workloads = synthetic_suite(args.scale, args.seed)
    weights = read_weights(args.weights) if args.weights else AreaWeights()
    options = _options(args)
    comparison = compare_setups(args.platform, workloads, weights, args.jobs, options, progress=not args.quiet)
    emit_setups_csv(comparison, out_dir / "setups.csv")
    emit_setups_figure_data(comparison, out_dir / ("fig8.dat" if args.platform == "tx2" else "fig9.dat"))
    console.print(comparison_table(comparison))
    if args.software_study:
        study = software_change_study(workloads, args.threads_per_block, weights, args.jobs, options,
                                      progress=not args.quiet)
        emit_setups_csv(study, out_dir / "software_study.csv")
        console.print(comparison_table(study))
    console.print(
        f"setups {args.platform}: "
        + ", ".join(f"{r.name}={'NA' if r.geomean is None else format(r.geomean, '.6g')}" for r in comparison.rows)
    )
    return 0


COMMANDS = {
    "config": cmd_config,
    "gen-workload": cmd_gen_workload,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "classify": cmd_classify,
    "setups": cmd_setups,
}


def _setup_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    log.handlers.clear()
    log.addHandler(RichHandler(console=err_console, show_time=False, show_path=False))
    log.setLevel(level)
    log.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_usage(parser, args)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    _setup_logging(args)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        err_console.print(f"error: {e.what} is invalid:")
        for v in e.violations:
            err_console.print(f"  - {v}")
        return 1
    except (GpuDseError, OSError) as e:
        err_console.print(f"error: {e}")
        return 1
    except Exception:
        err_console.print_exception(max_frames=20)
        return 1


if __name__ == "__main__":
    sys.exit(main())
