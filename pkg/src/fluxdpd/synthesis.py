"""Least-squares design of predistortion filters.

The IIR stage uses the equation-error (series-parallel) form: feedback terms
are fed with the *target* signal so the coefficients enter linearly,

    target[n] ~ sum_i b_i measured[n-i] + sum_j a_j target[n-j].

For a plant whose exact inverse fits in the chosen orders this is exact.  A
residual FIR stage is then fitted on the IIR-corrected response, evaluated
only where the FIR window is fully populated.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distortion import apply_distortion
from .errors import SingularSystemError
from .signal_core import (
    FirTaps,
    IirFilterSpec,
    Signal,
    apply_fir,
    apply_iir,
    max_deviation,
    nmse_db,
)

log = logging.getLogger(__name__)

COND_LIMIT = 1e10


@dataclass(frozen=True)
class SynthesisConfig:
    """Tap counts and fit window for an inverse IIR design.

    ``fit_window`` is a half-open ``(start, stop)`` sample range, or ``None``
    for "from the step edge to the end of the trace".
    """

    m_a: int
    m_b: int
    fit_window: tuple | None = None
    regularization: float = 0.0

    def __post_init__(self):
        if self.m_a < 0:
            raise ValueError("m_a must be >= 0")
        if self.m_b < 1:
            raise ValueError("m_b must be >= 1")
        if self.regularization < 0:
            raise ValueError("regularization must be nonnegative")
        if self.fit_window is not None:
            start, stop = self.fit_window
            if stop - start < self.m_a + self.m_b:
                raise ValueError(
                    f"fit window {self.fit_window} has fewer than m_a + m_b = "
                    f"{self.m_a + self.m_b} rows"
                )


@dataclass(frozen=True)
class CorrectionReport:
    nmse_db: float
    max_dev_iir: float
    max_dev_fir: float | None
    m_a: int
    m_b: int
    fir_length: int
    stable: bool

    def to_dict(self):
        return {
            "nmse_db": self.nmse_db,
            "max_dev_iir": self.max_dev_iir,
            "max_dev_fir": self.max_dev_fir,
            "m_a": self.m_a,
            "m_b": self.m_b,
            "fir_length": self.fir_length,
            "stable": self.stable,
        }


@dataclass
class TapSearchResult:
    config: SynthesisConfig
    filter: IirFilterSpec
    nmse_db: float
    met: bool
    skipped: list = field(default_factory=list)
    grid: dict = field(default_factory=dict)


def step_edge(signal):
    """Index of the first nonzero sample (0 for an all-zero signal)."""
    nz = np.flatnonzero(signal.samples)
    return int(nz[0]) if nz.size else 0


def _lagged(x, k):
    if k == 0:
        return x
    out = np.zeros_like(x)
    out[k:] = x[:-k]
    return out


def _resolve_window(window, target, n):
    if window is None:
        window = (step_edge(target), n)
    start, stop = int(window[0]), int(window[1])
    if not 0 <= start < stop <= n:
        raise ValueError(f"fit window {window} outside [0, {n}]")
    return start, stop


def solve_least_squares(X, y, ridge=0.0, label=""):
    """Ridge-regularized LS via normal equations, with an orthogonal fallback.

    Raises SingularSystemError when the (augmented) system is rank deficient.
    """
    ncols = X.shape[1]
    gram = X.T @ X + ridge * np.eye(ncols)
    if np.linalg.cond(gram) <= COND_LIMIT:
        return np.linalg.solve(gram, X.T @ y)
    if ridge > 0:
        X = np.vstack([X, np.sqrt(ridge) * np.eye(ncols)])
        y = np.concatenate([y, np.zeros(ncols)])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < ncols:
        raise SingularSystemError(
            f"design matrix for window {label} has rank {rank} < {ncols} unknowns"
        )
    return coef


def _check_inputs(measured, target):
    if len(measured) != len(target) or measured.sample_rate != target.sample_rate:
        raise ValueError("measured and target must share length and sample rate")


def _iir_regression(measured, target, m_a, m_b, start, stop):
    m = measured.samples
    t = target.samples
    cols = [_lagged(m, i) for i in range(m_b)] + [_lagged(t, j) for j in range(1, m_a + 1)]
    X = np.column_stack(cols)[start:stop]
    return X, t[start:stop]


def design_inverse_iir(measured_step, target_step, config):
    """Fit an IIR filter mapping ``measured_step`` onto ``target_step``.

    The returned filter may be unstable; check ``filter.is_stable``.
    """
    _check_inputs(measured_step, target_step)
    start, stop = _resolve_window(config.fit_window, target_step, len(target_step))
    if stop - start < config.m_a + config.m_b:
        raise ValueError("fit window shorter than the number of unknowns")
    X, y = _iir_regression(measured_step, target_step, config.m_a, config.m_b, start, stop)
    coef = solve_least_squares(X, y, config.regularization, label=f"[{start}, {stop})")
    spec = IirFilterSpec(coef[: config.m_b], coef[config.m_b :])
    if not spec.is_stable:
        log.info("designed IIR (Ma=%d, Mb=%d) has pole radius %.12g",
                 config.m_a, config.m_b, spec.pole_radius())
    return spec


def equation_error(measured_step, target_step, filter, fit_window=None):
    """Relative equation-error residual ``|y - X c|^2 / |y|^2`` of a design."""
    start, stop = _resolve_window(fit_window, target_step, len(target_step))
    X, y = _iir_regression(measured_step, target_step, filter.m_a, filter.m_b, start, stop)
    coef = np.concatenate([filter.feedforward, filter.feedback])
    r = y - X @ coef
    return float(r @ r / (y @ y))


def design_residual_fir(corrected_step, target_step, fir_length, fit_window=None, regularization=0.0):
    """LS FIR taps mapping ``corrected_step`` onto ``target_step``.

    Only rows with ``n >= fir_length - 1`` enter the fit, i.e. once the filter
    has full memory of the input.  ``regularization`` penalizes the departure
    of the taps from a pass-through filter.
    """
    _check_inputs(corrected_step, target_step)
    if fir_length < 1:
        raise ValueError("fir_length must be >= 1")
    start, stop = _resolve_window(fit_window, target_step, len(target_step))
    start = max(start, fir_length - 1)
    if stop - start < fir_length:
        raise ValueError(
            f"window [{start}, {stop}) has fewer full-memory rows than {fir_length} taps"
        )
    c = corrected_step.samples
    X = np.column_stack([_lagged(c, k) for k in range(fir_length)])[start:stop]
    # solve for the change from a pass-through filter so the ridge pulls
    # towards "no correction" rather than towards zero gain
    y = target_step.samples[start:stop] - c[start:stop]
    delta = solve_least_squares(X, y, regularization, label=f"[{start}, {stop})")
    delta[0] += 1.0
    return FirTaps(delta)


def _candidate_order(max_m_a, max_m_b):
    pairs = [(ma, mb) for ma in range(max_m_a + 1) for mb in range(1, max_m_b + 1)]
    return sorted(pairs, key=lambda p: (p[0] + p[1], p[0]))


def _evaluate_candidate(measured, target, ma, mb, window, regularization):
    cfg = SynthesisConfig(ma, mb, window, regularization)
    try:
        spec = design_inverse_iir(measured, target, cfg)
    except SingularSystemError as exc:
        return cfg, None, None, f"singular: {exc}"
    start, stop = window
    corrected = apply_iir(measured, spec)
    err = nmse_db(target[start:stop], corrected[start:stop])
    return cfg, spec, err, None


def search_min_taps(
    measured_step,
    target_step,
    threshold_db,
    max_m_a,
    max_m_b,
    fit_window=None,
    regularization=0.0,
    allow_marginal=False,
    exhaustive=False,
    workers=None,
):
    """Smallest ``(m_a, m_b)`` whose LS design reaches ``threshold_db``.

    Candidates are visited by ascending ``m_a + m_b``, ties going to the
    smaller ``m_a``.  Unstable designs are skipped and recorded; with
    ``allow_marginal`` poles on the unit circle are accepted (bias-tee
    inverses).  When no candidate meets the threshold the best stable one is
    returned with ``met=False``.

    ``workers > 1`` evaluates the grid concurrently; results are merged in
    search order so the outcome does not depend on scheduling.
    """
    _check_inputs(measured_step, target_step)
    window = _resolve_window(fit_window, target_step, len(target_step))
    order = [
        p for p in _candidate_order(max_m_a, max_m_b) if p[0] + p[1] <= window[1] - window[0]
    ]
    args = (measured_step, target_step)

    def run(pair):
        return _evaluate_candidate(*args, pair[0], pair[1], window, regularization)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evaluated = list(pool.map(run, order))
    else:
        evaluated = (run(p) for p in order)

    result = None
    best = None
    skipped = []
    grid = {}
    for cfg, spec, err, reason in evaluated:
        key = (cfg.m_a, cfg.m_b)
        if spec is None:
            skipped.append((key, reason))
            continue
        ok = spec.is_marginally_stable if allow_marginal else spec.is_stable
        if not ok:
            skipped.append((key, f"unstable: pole radius {spec.pole_radius():.12g}"))
            continue
        grid[key] = err
        if best is None or err < best[2]:
            best = (cfg, spec, err)
        if result is None and err <= threshold_db:
            result = TapSearchResult(cfg, spec, err, True)
            if not exhaustive:
                break

    if result is None:
        if best is None:
            raise SingularSystemError("no candidate configuration produced a usable filter")
        result = TapSearchResult(best[0], best[1], best[2], False)
    result.skipped = skipped
    result.grid = grid
    return result


def default_settle_index(target_step):
    """First full-amplitude sample of the ideal step, plus one."""
    return step_edge(target_step) + 1


def evaluate_correction(distortion, iir, fir, test_step, settle_index=None):
    """Run predistortion (IIR, then optional FIR) followed by ``distortion``.

    Deviations are measured against the plateau of ``test_step`` from
    ``settle_index`` onward.  ``distortion`` may be ``None`` for an ideal line.
    """
    if settle_index is None:
        settle_index = default_settle_index(test_step)
    if not 0 <= settle_index < len(test_step):
        raise ValueError(f"settle_index {settle_index} outside the test step")
    ideal = float(test_step.samples[-1])

    def line(x):
        return x if distortion is None else apply_distortion(distortion, x)

    pre_iir = apply_iir(test_step, iir)
    out_iir = line(pre_iir)
    dev_iir = max_deviation(out_iir, ideal, settle_index)
    final = out_iir
    dev_fir = None
    if fir is not None:
        final = line(apply_fir(pre_iir, fir))
        dev_fir = max_deviation(final, ideal, settle_index)
    return CorrectionReport(
        nmse_db=nmse_db(test_step, final),
        max_dev_iir=dev_iir,
        max_dev_fir=dev_fir,
        m_a=iir.m_a,
        m_b=iir.m_b,
        fir_length=0 if fir is None else len(fir),
        stable=iir.is_stable,
    )
