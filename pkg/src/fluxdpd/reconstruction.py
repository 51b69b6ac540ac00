"""Analysis side: Cryoscope traces to flux step responses, spectroscopy fits.

Phase is recovered from the X/Y populations, unwrapped, differentiated to an
instantaneous detuning and mapped back to flux through the inverse of the
flux/frequency relation (principal branch, flux in [0, 0.5]).
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, IdentifiabilityError, OutOfRangeError
from .signal_core import Signal, _frozen_array, fmt
from .transmon import TransmonParams, _check_uniform, flux_to_frequency, frequency_to_flux

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


class LowContrastWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PhaseSeries:
    durations: np.ndarray
    phase: np.ndarray
    quality: np.ndarray
    low_contrast: bool = False

    def __post_init__(self):
        tau = _frozen_array(self.durations, "durations")
        phase = _frozen_array(self.phase, "phase")
        quality = _frozen_array(self.quality, "quality")
        if not tau.size == phase.size == quality.size:
            raise ValueError("durations, phase and quality must have equal lengths")
        object.__setattr__(self, "durations", tau)
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "quality", quality)


@dataclass(frozen=True, eq=False)
class FluxResponse:
    """Reconstructed flux; ``normalized`` is ``raw_flux`` over its window mean."""

    times: np.ndarray
    normalized_flux: np.ndarray
    raw_flux: np.ndarray
    analysis_window: tuple

    @property
    def sample_rate(self):
        return 1.0 / (self.times[1] - self.times[0])

    def excursion(self, baseline_flux):
        """Flux change from ``baseline_flux``, divided by its window mean.

        Equals ``normalized_flux`` when the baseline is zero flux.
        """
        delta = self.raw_flux - baseline_flux
        start, stop = self.analysis_window
        mean = float(np.mean(delta[start:stop]))
        if mean == 0.0:
            raise ValueError("flux excursion has zero mean over the analysis window")
        return Signal(delta / mean, self.sample_rate)


def unwrap_phase(wrapped):
    """Remove 2*pi jumps so successive steps satisfy ``|step| <= pi``.

    A step of exactly pi is left alone.  The first element is unchanged and
    every output differs from its input by an integer multiple of 2*pi.
    """
    x = np.asarray(wrapped, dtype=float)
    if x.size == 0:
        raise ValueError("cannot unwrap an empty sequence")
    d = np.diff(x)
    # ties (|d| == pi) round toward zero
    k = np.sign(d) * np.ceil(np.abs(d) / TWO_PI - 0.5)
    offsets = np.concatenate(([0.0], np.cumsum(k)))
    return x - TWO_PI * offsets


def extract_phase(trace, quality_floor=0.05):
    bx = 2.0 * trace.p_x - 1.0
    by = 2.0 * trace.p_y - 1.0
    quality = np.hypot(bx, by)
    low = bool(np.any(quality < quality_floor))
    if low:
        worst = int(np.argmin(quality))
        warnings.warn(
            f"Bloch-vector length {quality[worst]:.3g} at index {worst} is below {quality_floor}",
            LowContrastWarning,
            stacklevel=2,
        )
    phase = unwrap_phase(np.arctan2(by, bx))
    return PhaseSeries(trace.durations, phase, quality, low)


def phase_to_detuning(phase):
    """Instantaneous detuning in Hz: central differences, one-sided at the ends."""
    tau = phase.durations
    if tau.size < 2:
        raise ValueError("need at least two phase points")
    try:
        _check_uniform(tau)
    except ValueError as exc:
        raise ValueError(f"phase series spacing: {exc}") from None
    step = (tau[-1] - tau[0]) / (tau.size - 1)
    det = np.gradient(phase.phase, step) / TWO_PI
    return Signal(det, 1.0 / step)


def detuning_to_flux_response(detuning, params, baseline_flux, analysis_window=None, start_time=0.0):
    """Invert the flux/frequency map sample by sample.

    ``analysis_window`` is a half-open index range used for the mean
    normalization; by default everything after the first sample.
    """
    n = len(detuning)
    if analysis_window is None:
        analysis_window = (1, n) if n > 1 else (0, n)
    start, stop = analysis_window
    if not 0 <= start < stop <= n:
        raise ValueError(f"analysis window {analysis_window} outside [0, {n}]")
    freq = flux_to_frequency(params, baseline_flux) + detuning.samples
    try:
        raw = np.atleast_1d(frequency_to_flux(params, freq))
    except OutOfRangeError as exc:
        raise OutOfRangeError(
            f"detuning {detuning.samples[exc.index]:.6g} Hz at sample {exc.index} "
            f"leaves the attainable band",
            index=exc.index,
        ) from None
    mean = float(np.mean(raw[start:stop]))
    if mean != 0.0:
        normalized = raw / mean
    elif not np.any(raw[start:stop]):
        # flat at zero flux: nothing to normalize, report unit level
        normalized = np.ones(n)
    else:
        raise ValueError("reconstructed flux has zero mean over the analysis window")
    times = start_time + np.arange(n) / detuning.sample_rate
    return FluxResponse(times, normalized, raw, (start, stop))


def write_flux_response_csv(path, response):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "raw_flux_phi0", "normalized"])
        for row in zip(response.times, response.raw_flux, response.normalized_flux):
            w.writerow([fmt(x) for x in row])


def read_flux_response_csv(path, analysis_window=None):
    rows = list(csv.DictReader(Path(path).open()))
    times = np.array([float(r["time_s"]) for r in rows])
    raw = np.array([float(r["raw_flux_phi0"]) for r in rows])
    norm = np.array([float(r["normalized"]) for r in rows])
    if analysis_window is None:
        analysis_window = (1, len(rows))
    return FluxResponse(times, norm, raw, analysis_window)


class PeakList(list):
    """(voltage, frequency) pairs; ``skipped`` lists voltages with no usable dip."""

    def __init__(self, items=(), skipped=()):
        super().__init__(items)
        self.skipped = list(skipped)


def _parabola_vertex(x, y):
    (x0, x1, x2), (y0, y1, y2) = x, y
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom
    if a <= 0:
        return x1
    return -b / (2 * a)


def extract_peaks(smap, snr=3.0):
    """Resonance frequency per voltage from the deepest transmission dip.

    The discrete minimum is refined by a parabola through the reciprocal dip
    depth at it and its two neighbours.  A row is skipped unless the mean
    depth over those three points exceeds ``snr`` times the per-point noise,
    so a single low noise sample does not pass for a resonance.
    """
    freqs = smap.probe_frequencies
    peaks, skipped = [], []
    for v, row in zip(smap.voltages, smap.response):
        j = int(np.argmin(row))
        level = float(np.median(row))
        near = row[max(j - 1, 0) : j + 2]
        depth = level - float(np.mean(near))
        # noise from the MAD of first differences; insensitive to the dip itself
        noise = 1.4826 * float(np.median(np.abs(np.diff(row) - np.median(np.diff(row))))) / math.sqrt(2)
        if depth <= 0 or depth <= snr * noise:
            skipped.append(float(v))
            continue
        f = float(freqs[j])
        if 0 < j < freqs.size - 1:
            # a Lorentzian dip has a parabolic reciprocal depth, so the
            # three-point vertex is exact for noiseless lines
            near = level - row[j - 1 : j + 2]
            if np.all(near > 0):
                f = _parabola_vertex(freqs[j - 1 : j + 2], 1.0 / near)
        peaks.append((float(v), f))
    if skipped:
        log.info("extract_peaks: %d of %d columns had no usable dip", len(skipped), smap.voltages.size)
    return PeakList(peaks, skipped)


@dataclass
class FitResult:
    params: TransmonParams
    rms_residual_hz: float
    iterations: int
    converged: bool = True
    cost_history: list = field(default_factory=list)

    def to_dict(self):
        d = self.params.to_dict()
        d["rms_residual_hz"] = self.rms_residual_hz
        d["iterations"] = self.iterations
        return d


def _model_and_jacobian(theta, v):
    log_ec, log_ej, k, off = theta
    ec, ej = math.exp(log_ec), math.exp(log_ej)
    plasma = math.sqrt(8 * ec * ej)
    u = np.pi * (k * v + off)
    c = np.cos(u)
    root = np.sqrt(np.abs(c))
    model = plasma * root - ec
    # d/du of plasma*sqrt|cos u|, floored away from the half-flux cusp
    d_u = -plasma * np.sign(c) * np.sin(u) / (2 * np.maximum(root, 1e-6))
    J = np.column_stack([0.5 * plasma * root - ec, 0.5 * plasma * root, d_u * np.pi * v, d_u * np.pi])
    return model, J


def fit_spectroscopy(points, initial_guess, max_iter=200, step_tol=1e-10, cost_tol=1e-12):
    """Fit ``(voltage, frequency)`` points to the transmon flux/frequency map.

    Levenberg-Marquardt in ``(log Ec, log Ej, flux_per_volt, flux_offset)``.
    Stops when the relative step drops below ``step_tol`` or the relative cost
    change below ``cost_tol``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 4:
        raise IdentifiabilityError(f"need at least 4 points for 4 parameters, got {pts.shape[0]}")
    v, f = pts[:, 0], pts[:, 1]
    span = abs(initial_guess.flux_per_volt) * float(v.max() - v.min())
    if span < 0.1:
        raise IdentifiabilityError(f"points span {span:.3g} flux quanta; need at least 0.1")

    theta = np.array(
        [
            math.log(initial_guess.ec_hz),
            math.log(initial_guess.ej_hz),
            initial_guess.flux_per_volt,
            initial_guess.flux_offset,
        ]
    )
    model, J = _model_and_jacobian(theta, v)
    r = f - model
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        JTJ = J.T @ J
        g = J.T @ r
        diag = np.diag(JTJ).copy()
        diag[diag == 0] = 1.0
        try:
            step = np.linalg.solve(JTJ + lam * np.diag(diag), g)
        except np.linalg.LinAlgError:
            raise IdentifiabilityError("normal matrix is singular; parameters are not identifiable") from None
        if np.linalg.norm(step) <= step_tol * (np.linalg.norm(theta) + step_tol):
            converged = True
            break
        trial = theta + step
        t_model, t_J = _model_and_jacobian(trial, v)
        t_r = f - t_model
        t_cost = float(t_r @ t_r)
        if t_cost <= cost:
            rel_change = (cost - t_cost) / cost if cost > 0 else 0.0
            theta, J, r, cost = trial, t_J, t_r, t_cost
            history.append(cost)
            lam = max(lam / 3.0, 1e-12)
            if rel_change < cost_tol:
                converged = True
                break
        else:
            lam *= 2.0
            if lam > 1e16:
                break

    params = TransmonParams(math.exp(theta[0]), math.exp(theta[1]), float(theta[2]), float(theta[3]))
    rms = math.sqrt(cost / v.size)
    if not converged:
        raise ConvergenceError(
            f"fit did not converge in {it} iterations (rms residual {rms:.6g} Hz)",
            best=params,
            rms_residual=rms,
        )
    if np.linalg.matrix_rank(J) < 4:
        raise IdentifiabilityError("Jacobian is rank deficient at the solution")
    return FitResult(params, rms, it, True, history)
