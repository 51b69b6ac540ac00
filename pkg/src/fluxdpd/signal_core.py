"""Uniformly sampled signals, difference-equation filtering and error metrics.

The filter convention is

    y[n] = sum_i b[i] x[n-i] + sum_j a[j] y[n-j],   i = 0..Mb-1, j = 1..Ma

with ``b = feedforward`` (Mb coefficients) and ``a = feedback`` (Ma
coefficients).  Note the plus sign on the feedback sum: ``a`` holds the
negated tail of the usual denominator polynomial.  All filtering starts from
zero initial conditions.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

#: Returned by :func:`nmse_db` when test and reference are identical.
#: The most negative finite double, so reports stay valid JSON.
NMSE_DB_FLOOR = -sys.float_info.max

STABILITY_MARGIN = 1e-9


def _frozen_array(values, name):
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Signal:
    """Real waveform sampled at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = _frozen_array(self.samples, "samples")
        if samples.size < 1:
            raise ValueError("a signal needs at least one sample")
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    @property
    def times(self):
        return np.arange(len(self)) / self.sample_rate

    def with_samples(self, samples):
        return Signal(samples, self.sample_rate)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return Signal(self.samples[item], self.sample_rate)
        return self.samples[item]


@dataclass(frozen=True, eq=False)
class IirFilterSpec:
    """Feedforward taps ``b_0..b_{Mb-1}`` and feedback taps ``a_1..a_{Ma}``."""

    feedforward: np.ndarray
    feedback: np.ndarray = ()

    def __post_init__(self):
        b = _frozen_array(self.feedforward, "feedforward")
        a = _frozen_array(self.feedback, "feedback")
        if b.size < 1:
            raise ValueError("at least one feedforward coefficient is required")
        object.__setattr__(self, "feedforward", b)
        object.__setattr__(self, "feedback", a)

    @property
    def m_b(self):
        return self.feedforward.size

    @property
    def m_a(self):
        return self.feedback.size

    @property
    def denominator(self):
        """Coefficients of ``1 - sum_j a_j z^-j`` in scipy ``lfilter`` form."""
        return np.concatenate(([1.0], -self.feedback))

    def poles(self):
        if self.m_a == 0:
            return np.zeros(0, dtype=complex)
        return np.roots(self.denominator)

    def pole_radius(self):
        poles = self.poles()
        return float(np.max(np.abs(poles))) if poles.size else 0.0

    @property
    def is_stable(self):
        return self.pole_radius() < 1.0 - STABILITY_MARGIN

    @property
    def is_marginally_stable(self):
        """True when no pole lies outside the unit circle (beyond the margin)."""
        return self.pole_radius() <= 1.0 + STABILITY_MARGIN

    def dc_gain(self):
        return float(self.feedforward.sum() / (1.0 - self.feedback.sum()))

    def impulse_response(self, length):
        impulse = np.zeros(length)
        impulse[0] = 1.0
        return lfilter(self.feedforward, self.denominator, impulse)

    def to_dict(self):
        return {"feedforward": self.feedforward.tolist(), "feedback": self.feedback.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["feedforward"], data.get("feedback", []))


@dataclass(frozen=True, eq=False)
class FirTaps:
    taps: np.ndarray

    def __post_init__(self):
        taps = _frozen_array(self.taps, "taps")
        if taps.size < 1:
            raise ValueError("an FIR filter needs at least one tap")
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size

    def as_iir(self):
        return IirFilterSpec(self.taps, [])


def make_step(amplitude, delay, total_duration, sample_rate):
    """Step of ``amplitude`` switching on at ``delay`` seconds."""
    if not sample_rate > 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    if not total_duration > 0:
        raise ValueError(f"total_duration must be positive, got {total_duration}")
    if delay < 0 or delay >= total_duration:
        raise ValueError("need 0 <= delay < total_duration")
    n = int(round(total_duration * sample_rate))
    if n < 1:
        raise ValueError("total_duration is shorter than one sample")
    # tolerate rounding when delay is an exact multiple of the period
    edge = math.ceil(delay * sample_rate - 1e-9)
    samples = np.zeros(n)
    samples[edge:] = amplitude
    return Signal(samples, sample_rate)


def apply_iir(input, filter):
    """Run the difference equation over ``input`` from rest."""
    out = lfilter(filter.feedforward, filter.denominator, input.samples)
    return Signal(out, input.sample_rate)


def apply_fir(input, taps):
    return apply_iir(input, taps.as_iir())


def _check_pair(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample rate mismatch: {a.sample_rate} vs {b.sample_rate}")


def nmse_db(reference, test):
    """Normalized mean-squared error of ``test`` against ``reference`` in dB.

    Identical signals give :data:`NMSE_DB_FLOOR` instead of ``-inf``.
    """
    _check_pair(reference, test)
    ref_energy = float(np.sum(reference.samples ** 2))
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    err_energy = float(np.sum((test.samples - reference.samples) ** 2))
    if err_energy == 0.0:
        return NMSE_DB_FLOOR
    return 10.0 * math.log10(err_energy / ref_energy)


def max_deviation(response, ideal_level, start_index=0):
    """Largest relative deviation ``|response/ideal - 1|`` from ``start_index`` on."""
    if not 0 <= start_index < len(response):
        raise ValueError(f"start_index {start_index} outside [0, {len(response)})")
    if ideal_level == 0:
        raise ValueError("ideal_level must be nonzero")
    tail = response.samples[start_index:]
    return float(np.max(np.abs(tail / ideal_level - 1.0)))


def fmt(x):
    """Fixed 15-significant-digit rendering used by every file writer."""
    return format(float(x), ".15g")


def write_signal_csv(path, signal):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time_s", "value"])
        for i, v in enumerate(signal.samples):
            w.writerow([i, fmt(i / signal.sample_rate), fmt(v)])


def read_signal_csv(path):
    rows = list(csv.DictReader(Path(path).open()))
    if len(rows) < 1:
        raise ValueError(f"{path}: no samples")
    if len(rows) < 2:
        raise ValueError(f"{path}: need two rows to infer the sample rate")
    values = [float(r["value"]) for r in rows]
    span = float(rows[-1]["time_s"]) - float(rows[0]["time_s"])
    index_span = int(rows[-1]["index"]) - int(rows[0]["index"])
    # times are printed to 15 digits; 12 recovers the rate exactly in practice
    rate = float(format(index_span / span, ".12g"))
    return Signal(values, rate)
