"""Reference signals for the two biomass populations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class ReferenceSpec:
    """Constant setpoint pair or a pair of sinusoids.

    A sinusoid evaluates to ``mean + amplitude * sin(2*pi*frequency*t/horizon + phase_i)``
    where ``frequency`` counts cycles per horizon. The default phases start
    b1* at its minimum (3 g/L) and b2* at its maximum (4 g/L).
    """

    kind: str = "constant"
    values: tuple[float, float] = (3.0, 4.0)
    frequency: float = 0.5
    phases: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    mean: float = 3.5
    amplitude: float = 0.5
    horizon: float = 18.0

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoid"):
            raise ConfigurationError(f"unknown reference kind {self.kind!r}")
        if not self.horizon > 0:
            raise ConfigurationError("reference horizon must be > 0")
        if self.kind == "constant":
            if len(self.values) != 2 or min(self.values) <= 0:
                raise ConfigurationError("constant setpoints must be two positive values")
        else:
            if len(self.phases) != 2:
                raise ConfigurationError("a sinusoid needs one phase per tracked state")
            if self.amplitude < 0 or self.mean - self.amplitude <= 0:
                raise ConfigurationError("sinusoid must stay strictly positive")

    @property
    def label(self) -> str:
        if self.kind == "constant":
            return "sp_" + "_".join(f"{v:g}" for v in self.values)
        return f"traj_phi_{self.frequency:g}"

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "values": list(self.values), "horizon": self.horizon}
        return {"kind": "sinusoid", "frequency": self.frequency, "phases": list(self.phases),
                "mean": self.mean, "amplitude": self.amplitude, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, data: dict) -> "ReferenceSpec":
        data = dict(data)
        for key in ("values", "phases"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


def reference_at(spec: ReferenceSpec, t) -> np.ndarray:
    """Reference pair ``(b1*, b2*)`` at time ``t``; vectorised over ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > spec.horizon):
        raise InvalidInputError(f"t must lie in [0, {spec.horizon}]")
    if spec.kind == "constant":
        return np.broadcast_to(np.array(spec.values, dtype=float), t.shape + (2,)).copy()
    omega = 2.0 * math.pi * spec.frequency / spec.horizon
    phases = np.array(spec.phases, dtype=float)
    return spec.mean + spec.amplitude * np.sin(omega * t[..., None] + phases)


def reference_series(spec: ReferenceSpec, n_steps: int, dt: float = 1.0) -> np.ndarray:
    """References on the rewarded grid ``t = dt, 2 dt, ..., n_steps dt``; shape ``(n_steps, 2)``."""
    times = dt * np.arange(1, n_steps + 1)
    return reference_at(spec, times)


def write_reference_csv(path, spec: ReferenceSpec, n_steps: int, dt: float = 1.0) -> None:
    refs = reference_series(spec, n_steps, dt)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t", "b1_star", "b2_star"))
        for k, (r1, r2) in enumerate(refs, start=1):
            writer.writerow((repr(k * dt), repr(float(r1)), repr(float(r2))))


def read_reference_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["b1_star"]), float(r["b2_star"])] for r in rows])
