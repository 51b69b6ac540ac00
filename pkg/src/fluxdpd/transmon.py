"""Flux-tunable transmon: flux/frequency map and simulated measurements.

Energies are carried as frequencies (E/h in Hz) and flux in units of the
flux quantum, so the qubit frequency of a symmetric SQUID transmon is

    f_q(flux) = sqrt(8 Ec Ej |cos(pi flux)|) - Ec.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OutOfRangeError
from .signal_core import _frozen_array, fmt

FLUX_QUANTUM_WB = 2.067833848e-15


@dataclass(frozen=True)
class TransmonParams:
    ec_hz: float
    ej_hz: float
    flux_per_volt: float = 1.0
    flux_offset: float = 0.0

    def __post_init__(self):
        if not (self.ec_hz > 0 and self.ej_hz > 0):
            raise ValueError("ec_hz and ej_hz must be positive")
        ratio = self.ej_hz / self.ec_hz
        if ratio < 1:
            raise ValueError(f"Ej/Ec = {ratio:.3g} is far outside the transmon regime")
        if ratio < 10:
            warnings.warn(f"Ej/Ec = {ratio:.3g} < 10: not in the transmon regime", stacklevel=2)

    @property
    def plasma_hz(self):
        """sqrt(8 Ec Ej), the sweet-spot frequency plus Ec."""
        return math.sqrt(8.0 * self.ec_hz * self.ej_hz)

    @property
    def max_frequency(self):
        return self.plasma_hz - self.ec_hz

    def to_dict(self):
        return {
            "ec_hz": self.ec_hz,
            "ej_hz": self.ej_hz,
            "flux_per_volt": self.flux_per_volt,
            "flux_offset": self.flux_offset,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["ec_hz"]),
            float(d["ej_hz"]),
            float(d.get("flux_per_volt", 1.0)),
            float(d.get("flux_offset", 0.0)),
        )


@dataclass(frozen=True)
class CoherenceParams:
    t1: float
    t2_star: float

    def __post_init__(self):
        if not (self.t1 > 0 and self.t2_star > 0):
            raise ValueError("coherence times must be positive")
        if self.t2_star > 2 * self.t1:
            raise ValueError(f"t2_star = {self.t2_star} exceeds 2*t1 = {2 * self.t1}")


def _check_uniform(durations, what="durations"):
    if durations.size < 2:
        return
    steps = np.diff(durations)
    if np.any(steps <= 0):
        raise ValueError(f"{what} must be strictly increasing")
    # allow for rounding of the absolute times themselves
    tol = 1e-12 * steps[0] + 8 * np.finfo(float).eps * np.max(np.abs(durations))
    if np.max(np.abs(steps - steps[0])) > tol:
        raise ValueError(f"{what} are not uniformly spaced")


@dataclass(frozen=True, eq=False)
class CryoscopeTrace:
    durations: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray

    def __post_init__(self):
        tau = _frozen_array(self.durations, "durations")
        px = _frozen_array(self.p_x, "p_x")
        py = _frozen_array(self.p_y, "p_y")
        if not tau.size == px.size == py.size:
            raise ValueError("durations, p_x and p_y must have equal lengths")
        _check_uniform(tau)
        eps = 1e-9
        for p in (px, py):
            if np.any(p < -eps) or np.any(p > 1 + eps):
                raise ValueError("populations must lie in [0, 1]")
        object.__setattr__(self, "durations", tau)
        object.__setattr__(self, "p_x", px)
        object.__setattr__(self, "p_y", py)

    def __len__(self):
        return self.durations.size


@dataclass(frozen=True, eq=False)
class SpectroscopyMap:
    """Transmission magnitude, one row per voltage and one column per probe frequency."""

    voltages: np.ndarray
    probe_frequencies: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.voltages, "voltages")
        f = _frozen_array(self.probe_frequencies, "probe_frequencies")
        r = np.array(self.response, dtype=float)
        if r.shape != (v.size, f.size):
            raise ValueError(f"response shape {r.shape} does not match axes ({v.size}, {f.size})")
        if not np.all(np.isfinite(r)):
            raise ValueError("response must be finite")
        r.setflags(write=False)
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "probe_frequencies", f)
        object.__setattr__(self, "response", r)


def flux_to_frequency(params, flux):
    """Qubit frequency in Hz at ``flux`` (flux-quantum units); vectorized."""
    flux = np.asarray(flux, dtype=float)
    # |cos(pi flux)| as a sine of the distance to half flux, exact at 0.5
    c = np.sin(np.pi * (0.5 - np.abs(flux - np.rint(flux))))
    out = params.plasma_hz * np.sqrt(c) - params.ec_hz
    return float(out) if out.ndim == 0 else out


def frequency_to_flux(params, frequency):
    """Principal-branch flux in [0, 0.5] producing ``frequency``.

    Raises OutOfRangeError outside ``[-Ec, f_max]``.
    """
    f = np.asarray(frequency, dtype=float)
    s = (f + params.ec_hz) / params.plasma_hz  # sqrt(|cos(pi flux)|)
    bad = (s > 1.0 + 4 * np.finfo(float).eps) | (s < 0.0) | ~np.isfinite(s)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        value = float(np.atleast_1d(f)[idx])
        raise OutOfRangeError(
            f"frequency {value:.12g} Hz at index {idx} is outside "
            f"[{-params.ec_hz:.12g}, {params.max_frequency:.12g}] Hz",
            index=idx,
        )
    s = np.clip(s, 0.0, 1.0)
    cos_t = s * s
    # 1 - s^4 factored to keep precision near the sweet spot
    sin_t = np.sqrt((1.0 - s) * (1.0 + s) * (1.0 + cos_t))
    out = np.arctan2(sin_t, cos_t) / np.pi
    return float(out) if out.ndim == 0 else out


def voltage_to_flux(params, voltage):
    out = params.flux_per_volt * np.asarray(voltage, dtype=float) + params.flux_offset
    return float(out) if out.ndim == 0 else out


def lorentzian(detuning, linewidth):
    """Unit-height Lorentzian with full width at half maximum ``linewidth``."""
    x = 2.0 * np.asarray(detuning) / linewidth
    return 1.0 / (1.0 + x * x)


def simulate_spectroscopy(params, voltages, probe_frequencies, linewidth, contrast=0.5, noise_sd=0.0, seed=0):
    """Two-dimensional flux spectroscopy map with a Lorentzian transmission dip."""
    if not linewidth > 0:
        raise ValueError("linewidth must be positive")
    v = np.asarray(voltages, dtype=float)
    f = np.asarray(probe_frequencies, dtype=float)
    if v.size == 0 or f.size == 0:
        raise ValueError("voltage and frequency axes must be non-empty")
    fq = flux_to_frequency(params, voltage_to_flux(params, v))
    fq = np.atleast_1d(fq)[:, None]
    response = 1.0 - contrast * lorentzian(f[None, :] - fq, linewidth)
    if noise_sd > 0:
        response = response + np.random.default_rng(seed).normal(0.0, noise_sd, response.shape)
    return SpectroscopyMap(v, f, response)


def _grid_indices(times, sample_rate, n_samples):
    k = np.rint(np.asarray(times) * sample_rate).astype(int)
    if np.any(k < 0) or np.any(k > n_samples - 1):
        raise ValueError(
            f"durations must lie within the waveform span [0, {(n_samples - 1) / sample_rate:.6g}] s"
        )
    return k


def cryoscope_phase(params, flux_waveform, baseline_flux, durations):
    """Phase accumulated up to each duration, trapezoidal rule on the waveform grid.

    Positive detuning (qubit above its baseline frequency) advances the phase.
    """
    detuning = np.atleast_1d(flux_to_frequency(params, flux_waveform.samples)) - flux_to_frequency(
        params, baseline_flux
    )
    dt = flux_waveform.dt
    grid_phase = np.concatenate(([0.0], np.cumsum(0.5 * (detuning[1:] + detuning[:-1]) * dt)))
    k = _grid_indices(durations, flux_waveform.sample_rate, len(flux_waveform))
    return 2.0 * np.pi * grid_phase[k]


def simulate_cryoscope(
    params, coherence, flux_waveform, baseline_flux, durations, readout_noise_sd=0.0, seed=0
):
    """Ramsey-style X/Y populations for a flux pulse truncated at each duration.

    ``flux_waveform`` is the distorted flux seen by the qubit for the full-length
    pulse, starting at t = 0; each duration integrates its leading part.
    Durations are snapped to the waveform grid.
    """
    tau = np.asarray(durations, dtype=float)
    _check_uniform(tau)
    k = _grid_indices(tau, flux_waveform.sample_rate, len(flux_waveform))
    snapped = k / flux_waveform.sample_rate
    phi = cryoscope_phase(params, flux_waveform, baseline_flux, snapped)
    contrast = np.exp(-snapped / coherence.t2_star)
    p_x = 0.5 * (1.0 + contrast * np.cos(phi))
    p_y = 0.5 * (1.0 + contrast * np.sin(phi))
    if readout_noise_sd > 0:
        rng = np.random.default_rng(seed)
        p_x = p_x + rng.normal(0.0, readout_noise_sd, p_x.shape)
        p_y = p_y + rng.normal(0.0, readout_noise_sd, p_y.shape)
    return CryoscopeTrace(snapped, np.clip(p_x, 0.0, 1.0), np.clip(p_y, 0.0, 1.0))


def write_trace_csv(path, trace):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_s", "p_x", "p_y"])
        for row in zip(trace.durations, trace.p_x, trace.p_y):
            w.writerow([fmt(x) for x in row])


def read_trace_csv(path):
    rows = list(csv.DictReader(Path(path).open()))
    return CryoscopeTrace(
        [float(r["tau_s"]) for r in rows],
        [float(r["p_x"]) for r in rows],
        [float(r["p_y"]) for r in rows],
    )


def write_map_csv(path, smap):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voltage_v"] + [fmt(f) for f in smap.probe_frequencies])
        for v, row in zip(smap.voltages, smap.response):
            w.writerow([fmt(v)] + [fmt(x) for x in row])


def read_map_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValueError(f"{path}: spectroscopy map needs a header row and at least one voltage row")
    freqs = [float(x) for x in rows[0][1:]]
    volts = [float(r[0]) for r in rows[1:]]
    body = [[float(x) for x in r[1:]] for r in rows[1:]]
    return SpectroscopyMap(volts, freqs, body)
