"""Stochastic risk processes used by synthetic streams and stability analyses.

A process maps (rng, time) to a risk value in [0, 1]. Three kinds are
supported: a constant value, i.i.d. Beta(a, b) draws, and a deterministic
step change at a configured time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class ConstantProcess:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError(f"constant risk must lie in [0,1], got {self.value}")

    def sample_at(self, rng: np.random.Generator, t_s: float) -> float:
        return self.value


@dataclass
class BetaProcess:
    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ConfigError(f"beta parameters must be positive, got ({self.a}, {self.b})")

    def sample_at(self, rng: np.random.Generator, t_s: float) -> float:
        return float(rng.beta(self.a, self.b))


@dataclass
class StepProcess:
    """Risk jumps from `before` to `after` at time `t_change_s`."""

    before: float
    after: float
    t_change_s: float

    def __post_init__(self):
        for v in (self.before, self.after):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"step risk levels must lie in [0,1], got {v}")

    def sample_at(self, rng: np.random.Generator, t_s: float) -> float:
        return self.after if t_s >= self.t_change_s else self.before


RiskProcess = ConstantProcess | BetaProcess | StepProcess


def parse_process(spec: str) -> RiskProcess:
    """Parse a process spec string: ``const:0.5``, ``beta:2,5``, ``step:0.2,0.7,30``."""
    kind, _, rest = spec.partition(":")
    try:
        args = [float(x) for x in rest.split(",")] if rest else []
    except ValueError as exc:
        raise ConfigError(f"bad process arguments in {spec!r}") from exc
    if kind == "const" and len(args) == 1:
        return ConstantProcess(args[0])
    if kind == "beta" and len(args) == 2:
        return BetaProcess(args[0], args[1])
    if kind == "step" and len(args) == 3:
        return StepProcess(args[0], args[1], args[2])
    raise ConfigError(f"unknown process spec {spec!r} (expected const:v, beta:a,b or step:lo,hi,t)")


def process_to_spec(process: RiskProcess) -> str:
    if isinstance(process, ConstantProcess):
        return f"const:{process.value}"
    if isinstance(process, BetaProcess):
        return f"beta:{process.a},{process.b}"
    return f"step:{process.before},{process.after},{process.t_change_s}"
