"""Exceptions raised by gpudse.

Everything the package raises on purpose derives from GpuDseError, so the
command line can tell domain failures (exit 1) from usage errors (exit 2).
"""
from dataclasses import dataclass


@dataclass(frozen=True)
class Violation:
    """One broken invariant, addressed by its dotted field path."""

    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class GpuDseError(Exception):
    pass


class ConfigError(GpuDseError):
    pass


class ValidationError(GpuDseError):
    def __init__(self, what: str, violations: list[Violation]):
        self.what = what
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{what} is invalid:\n{lines}")


class KernelFormatError(GpuDseError):
    def __init__(self, path: str, message: str, line: int | None = None, field: str | None = None):
        self.path = path
        self.line = line
        self.field = field
        where = path if line is None else f"{path}:{line}"
        if field is not None:
            message = f"field '{field}': {message}"
        super().__init__(f"{where}: {message}")


class UnschedulableKernelError(GpuDseError):
    def __init__(self, kernel_label: str, limit: str):
        self.kernel_label = kernel_label
        self.limit = limit
        super().__init__(
            f"kernel '{kernel_label}' cannot place a single block on an SM (binding limit: {limit})"
        )


class SimulationAbortedError(GpuDseError):
    def __init__(self, kernel_label: str, cycle_cap: int):
        self.kernel_label = kernel_label
        self.cycle_cap = cycle_cap
        super().__init__(f"simulation of '{kernel_label}' exceeded the cycle cap of {cycle_cap}")


class SweepDataError(GpuDseError):
    pass
