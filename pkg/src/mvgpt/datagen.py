"""Synthetic data: damped oscillator families and a known-noise AR(1) process."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .errors import DataError
from .schema import EventRecord


@dataclass(frozen=True)
class OscillatorSpec:
    amplitude: float = 1.0
    damping: float = 0.0
    omega: float = 1.0
    phase: float = 0.0
    dt: float = 0.25
    n_points: int = 100
    noise_std: float = 0.0

    def __post_init__(self):
        if self.damping < 0:
            raise DataError("damping must be >= 0")
        if not self.omega > 0:
            raise DataError("omega must be > 0")
        if not self.dt > 0:
            raise DataError("dt must be > 0")
        if self.n_points < 1:
            raise DataError("n_points must be >= 1")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt

    def trajectory(self) -> np.ndarray:
        """Noise-free ``A * exp(-damping*t) * cos(omega*t + phase)``."""
        t = self.times()
        return self.amplitude * np.exp(-self.damping * t) * np.cos(self.omega * t + self.phase)


def default_oscillator_family() -> tuple[list[OscillatorSpec], OscillatorSpec]:
    """18 training trajectories and one held-out trajectory."""
    train = [
        OscillatorSpec(amplitude=a, damping=g, phase=p)
        for a, g, p in product((0.6, 0.8, 1.0), (0.05, 0.1), (0.0, math.pi / 3, 2 * math.pi / 3))
    ]
    holdout = OscillatorSpec(amplitude=0.9, damping=0.075, phase=math.pi / 6)
    return train, holdout


def oscillator_records(spec: OscillatorSpec, seq_id: str, rng: np.random.Generator) -> list[EventRecord]:
    x = spec.trajectory()
    if spec.noise_std > 0:
        x = x + rng.normal(0.0, spec.noise_std, size=x.shape)
    return [EventRecord(seq_id, float(t), "x", float(v)) for t, v in zip(spec.times(), x)]


def gen_oscillator_dataset(
    specs: Sequence[OscillatorSpec], holdout: OscillatorSpec, seed: int = 0
) -> tuple[list[EventRecord], list[EventRecord]]:
    """Records for each training spec (``osc00``, ``osc01``, ...) and the holdout."""
    if holdout in specs:
        raise DataError("the holdout oscillator duplicates a training spec")
    train = []
    for i, spec in enumerate(specs):
        train += oscillator_records(spec, f"osc{i:02d}", np.random.default_rng([seed, i]))
    held = oscillator_records(holdout, "holdout", np.random.default_rng([seed, len(specs)]))
    return train, held


def gen_calibration_dataset(
    n_sequences: int,
    length: int,
    noise_std: float,
    seed: int = 0,
    ar_coef: float = 0.8,
    prefix: str = "cal",
) -> list[EventRecord]:
    """AR(1) sequences ``y[t] = ar_coef * y[t-1] + eps``, ``eps ~ N(0, noise_std^2)``.

    The one-step conditional law is exactly ``N(ar_coef * y[t-1], noise_std^2)``,
    so a calibrated predictor covers 95% of values with ``mu +- 1.96 sigma``.
    ``y[0]`` is drawn from the stationary distribution; samples are one time
    unit apart.
    """
    if not noise_std > 0:
        raise DataError("noise_std must be > 0")
    if not abs(ar_coef) < 1:
        raise DataError("ar_coef must lie in (-1, 1) for a stationary process")
    if n_sequences < 1 or length < 1:
        raise DataError("n_sequences and length must be >= 1")
    records = []
    stationary = noise_std / math.sqrt(1.0 - ar_coef**2)
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        eps = rng.normal(0.0, noise_std, size=length)
        y = np.empty(length)
        y[0] = rng.normal(0.0, stationary)
        for t in range(1, length):
            y[t] = ar_coef * y[t - 1] + eps[t]
        records += [EventRecord(f"{prefix}{i:04d}", float(t), "y", float(v)) for t, v in enumerate(y)]
    return records
