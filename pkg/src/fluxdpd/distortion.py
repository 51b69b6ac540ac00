"""Classical flux-line distortion models and their difference-equation form.

Three models are supported, plus cascades of them:

* ``SecondOrderAwg``: under-damped second-order low-pass
  ``H(s) = wn^2 / (s^2 + 2 zeta wn s + wn^2)``, discretized with the bilinear
  transform.
* ``ExponentialOvershoot``: step response ``(1 + A exp(-t/tau)) u(t)``.
* ``BiasTeeHighPass``: step response ``exp(-t/tau)``.

The two first-order models are discretized step-invariantly, so their sampled
step responses are exact at every sample instant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.signal import bilinear

from .signal_core import IirFilterSpec, Signal, apply_iir, make_step

MIN_SAMPLES_PER_TIME_CONSTANT = 10.0

# Typical time constants of each distortion source.  Values outside these
# windows are allowed but flagged.
AWG_PERIOD_RANGE = (1e-9, 100e-9)
OVERSHOOT_TAU_RANGE = (1e-9, 10e-6)
BIAS_TEE_TAU_RANGE = (10e-6, 10e-3)


class DistortionRangeWarning(UserWarning):
    """A model parameter lies outside its typical hardware range."""


def _check_range(value, bounds, what):
    lo, hi = bounds
    if not lo <= value <= hi:
        warnings.warn(
            f"{what} = {value:.3g} s is outside the typical range [{lo:.0e}, {hi:.0e}] s",
            DistortionRangeWarning,
            stacklevel=3,
        )


@dataclass(frozen=True)
class SecondOrderAwg:
    omega_n: float
    zeta: float

    def __post_init__(self):
        if not self.omega_n > 0:
            raise ValueError(f"omega_n must be positive, got {self.omega_n}")
        if not 0 < self.zeta < 1:
            raise ValueError(f"zeta must be in (0, 1) for an under-damped AWG, got {self.zeta}")
        _check_range(2 * math.pi / self.omega_n, AWG_PERIOD_RANGE, "AWG period 2*pi/omega_n")

    @classmethod
    def from_period(cls, period, zeta):
        return cls(2 * math.pi / period, zeta)

    @classmethod
    def from_rise_time(cls, rise_time, zeta):
        """Build from a 10-90 % rise time; rise time scales as ``1/omega_n``."""
        return cls(awg_rise_time(1.0, zeta) / rise_time, zeta)

    @property
    def min_sample_rate(self):
        return MIN_SAMPLES_PER_TIME_CONSTANT * self.omega_n / (2 * math.pi)


@dataclass(frozen=True)
class ExponentialOvershoot:
    amplitude: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.amplitude > -1:
            raise ValueError(f"amplitude must exceed -1, got {self.amplitude}")
        _check_range(self.tau, OVERSHOOT_TAU_RANGE, "overshoot tau")

    @property
    def min_sample_rate(self):
        return MIN_SAMPLES_PER_TIME_CONSTANT / self.tau


@dataclass(frozen=True)
class BiasTeeHighPass:
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        _check_range(self.tau, BIAS_TEE_TAU_RANGE, "bias-tee tau")

    @property
    def min_sample_rate(self):
        return MIN_SAMPLES_PER_TIME_CONSTANT / self.tau


@dataclass(frozen=True)
class Cascade:
    """Stages in application order, first element closest to the AWG."""

    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a cascade needs at least one stage")
        object.__setattr__(self, "stages", stages)

    @property
    def min_sample_rate(self):
        return max(s.min_sample_rate for s in self.stages)


@dataclass(frozen=True)
class DigitalFilterRealization:
    """Difference equation of a model at a given sample rate.

    ``stages`` holds one filter per elementary model so cascades can be run
    stage by stage; ``filter`` is their polynomial product.
    """

    filter: IirFilterSpec
    sample_rate: float
    stages: tuple


def _flatten(model):
    if isinstance(model, Cascade):
        out = []
        for s in model.stages:
            out.extend(_flatten(s))
        return out
    return [model]


def _stage_filter(model, sample_rate):
    ts = 1.0 / sample_rate
    if isinstance(model, ExponentialOvershoot):
        r = math.exp(-ts / model.tau)
        a = model.amplitude
        return IirFilterSpec([1 + a, -(r + a)], [r])
    if isinstance(model, BiasTeeHighPass):
        r = math.exp(-ts / model.tau)
        return IirFilterSpec([1.0, -1.0], [r])
    if isinstance(model, SecondOrderAwg):
        wn, z = model.omega_n, model.zeta
        b, a = bilinear([wn * wn], [1.0, 2 * z * wn, wn * wn], fs=sample_rate)
        return IirFilterSpec(b / a[0], -a[1:] / a[0])
    raise TypeError(f"unknown distortion model {model!r}")


def _compose(filters):
    num = np.array([1.0])
    den = np.array([1.0])
    for f in filters:
        num = np.convolve(num, f.feedforward)
        den = np.convolve(den, f.denominator)
    return IirFilterSpec(num, -den[1:])


def discretize(model, sample_rate):
    """Difference-equation realization of ``model`` at ``sample_rate`` Hz."""
    required = model.min_sample_rate
    if sample_rate < required * (1 - 1e-12):
        raise ValueError(
            f"sample rate {sample_rate:.6g} Hz under-samples {model!r}; "
            f"need at least {required:.6g} Hz"
        )
    stages = tuple(_stage_filter(m, sample_rate) for m in _flatten(model))
    combined = stages[0] if len(stages) == 1 else _compose(stages)
    return DigitalFilterRealization(combined, float(sample_rate), stages)


def apply_distortion(model, input):
    realization = discretize(model, input.sample_rate)
    out = input
    for stage in realization.stages:
        out = apply_iir(out, stage)
    return out


def step_response(model, amplitude, duration, sample_rate):
    """Response of ``model`` to a step of ``amplitude`` volts switched on at t=0."""
    return apply_distortion(model, make_step(amplitude, 0.0, duration, sample_rate))


def awg_continuous_step(t, omega_n, zeta):
    """Unit step response of the continuous under-damped second-order system."""
    t = np.asarray(t, dtype=float)
    wd = omega_n * math.sqrt(1 - zeta * zeta)
    k = zeta / math.sqrt(1 - zeta * zeta)
    return 1 - np.exp(-zeta * omega_n * t) * (np.cos(wd * t) + k * np.sin(wd * t))


def awg_rise_time(omega_n, zeta):
    """10-90 % rise time of :func:`awg_continuous_step`."""
    wd = omega_n * math.sqrt(1 - zeta * zeta)
    t_peak = math.pi / wd
    f = lambda level: brentq(lambda t: awg_continuous_step(t, omega_n, zeta) - level, 0.0, t_peak)
    return f(0.9) - f(0.1)


def awg_overshoot(zeta):
    return math.exp(-math.pi * zeta / math.sqrt(1 - zeta * zeta))


def model_from_dict(data):
    """Parse the model JSON form (SI units, unit-suffixed keys)."""
    kind = data.get("type")
    try:
        if kind == "second_order_awg":
            if "omega_n_rad_s" in data:
                return SecondOrderAwg(float(data["omega_n_rad_s"]), float(data["zeta"]))
            if "period_s" in data:
                return SecondOrderAwg.from_period(float(data["period_s"]), float(data["zeta"]))
            if "rise_time_s" in data:
                return SecondOrderAwg.from_rise_time(float(data["rise_time_s"]), float(data["zeta"]))
            raise KeyError("omega_n_rad_s")
        if kind == "exponential_overshoot":
            return ExponentialOvershoot(float(data["amplitude"]), float(data["tau_s"]))
        if kind == "bias_tee":
            return BiasTeeHighPass(float(data["tau_s"]))
        if kind == "cascade":
            return Cascade(tuple(model_from_dict(s) for s in data["stages"]))
    except KeyError as exc:
        raise ValueError(f"{kind} model is missing field {exc.args[0]!r}") from None
    raise ValueError(f"unknown model type {kind!r}")


def model_to_dict(model):
    if isinstance(model, SecondOrderAwg):
        return {"type": "second_order_awg", "omega_n_rad_s": model.omega_n, "zeta": model.zeta}
    if isinstance(model, ExponentialOvershoot):
        return {"type": "exponential_overshoot", "amplitude": model.amplitude, "tau_s": model.tau}
    if isinstance(model, BiasTeeHighPass):
        return {"type": "bias_tee", "tau_s": model.tau}
    if isinstance(model, Cascade):
        return {"type": "cascade", "stages": [model_to_dict(s) for s in model.stages]}
    raise TypeError(f"unknown distortion model {model!r}")
