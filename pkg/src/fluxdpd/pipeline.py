"""Config-driven command line: simulate, reconstruct, fit and calibrate.

Every subcommand reads one JSON config (SI units, unit-suffixed keys),
stages its files in a temporary directory inside the output directory and
moves them into place only when the whole run succeeded.

Exit codes: 0 success, 2 config error, 3 reconstruction range error,
4 fit divergence, 5 identifiability.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .distortion import apply_distortion, model_from_dict, model_to_dict
from .errors import (
    ConfigError,
    ConvergenceError,
    IdentifiabilityError,
    OutOfRangeError,
    SingularSystemError,
)
from .reconstruction import (
    FluxResponse,
    detuning_to_flux_response,
    extract_peaks,
    extract_phase,
    fit_spectroscopy,
    phase_to_detuning,
    write_flux_response_csv,
)
from .signal_core import (
    FirTaps,
    IirFilterSpec,
    Signal,
    apply_fir,
    apply_iir,
    fmt,
    make_step,
    max_deviation,
    nmse_db,
    read_signal_csv,
    write_signal_csv,
)
from .synthesis import (
    CorrectionReport,
    SynthesisConfig,
    design_inverse_iir,
    design_residual_fir,
    evaluate_correction,
    search_min_taps,
    step_edge,
)
from .transmon import (
    CoherenceParams,
    TransmonParams,
    read_map_csv,
    read_trace_csv,
    simulate_cryoscope,
    simulate_spectroscopy,
    voltage_to_flux,
    write_map_csv,
    write_trace_csv,
)

log = logging.getLogger("fluxdpd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RANGE = 3
EXIT_DIVERGED = 4
EXIT_IDENTIFIABILITY = 5


# --------------------------------------------------------------------------
# configuration


class _Section:
    """Dict wrapper whose lookups report the dotted path of a bad field."""

    def __init__(self, data, path=""):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
        self.data = data
        self.path = path

    def _where(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key):
        return self.data.get(key) is not None

    def section(self, key, required=True):
        if key not in self.data or self.data[key] is None:
            if required:
                raise ConfigError(f"{self._where(key)}: missing section")
            return _Section({}, self._where(key))
        return _Section(self.data[key], self._where(key))

    def number(self, key, default=None, positive=False, nonnegative=False):
        if key not in self.data or self.data[key] is None:
            if default is None:
                raise ConfigError(f"{self._where(key)}: missing required field")
            return default
        value = self.data[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{self._where(key)}: expected a finite number, got {value!r}")
        if positive and not value > 0:
            raise ConfigError(f"{self._where(key)}: must be positive, got {value!r}")
        if nonnegative and value < 0:
            raise ConfigError(f"{self._where(key)}: must be nonnegative, got {value!r}")
        return float(value)

    def integer(self, key, default=None, minimum=None):
        if key not in self.data or self.data[key] is None:
            if default is None:
                raise ConfigError(f"{self._where(key)}: missing required field")
            return default
        value = self.data[key]
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{self._where(key)}: expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{self._where(key)}: must be >= {minimum}, got {value}")
        return value

    def flag(self, key, default=False):
        value = self.data.get(key, default)
        if not isinstance(value, bool):
            raise ConfigError(f"{self._where(key)}: expected true or false, got {value!r}")
        return value

    def text(self, key, default=None):
        value = self.data.get(key, default)
        if value is None:
            raise ConfigError(f"{self._where(key)}: missing required field")
        if not isinstance(value, str):
            raise ConfigError(f"{self._where(key)}: expected a string, got {value!r}")
        return value


def _model(data, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a model object")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return model_from_dict(data)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class SynthesisSettings:
    threshold_db: float = -30.0
    max_m_a: int = 2
    max_m_b: int = 4
    m_a: int | None = None
    m_b: int | None = None
    fir_length: int = 0
    regularization: float = 0.0
    fir_regularization: float = 0.0
    allow_marginal: bool = False
    settle_index: int | None = None
    workers: int | None = None

    @property
    def fixed(self):
        return self.m_a is not None and self.m_b is not None


def _synthesis(s):
    syn = SynthesisSettings(
        threshold_db=s.number("threshold_db", -30.0),
        max_m_a=s.integer("max_m_a", 2, minimum=0),
        max_m_b=s.integer("max_m_b", 4, minimum=1),
        m_a=s.integer("m_a", minimum=0) if s.has("m_a") else None,
        m_b=s.integer("m_b", minimum=1) if s.has("m_b") else None,
        fir_length=s.integer("fir_length", 0, minimum=0),
        regularization=s.number("regularization", 0.0, nonnegative=True),
        fir_regularization=s.number("fir_regularization", 0.0, nonnegative=True),
        allow_marginal=s.flag("allow_marginal", False),
        settle_index=s.integer("settle_index", minimum=0) if s.has("settle_index") else None,
        workers=s.integer("workers", minimum=1) if s.has("workers") else None,
    )
    if (syn.m_a is None) != (syn.m_b is None):
        raise ConfigError(f"{s.path}: give both m_a and m_b, or neither to run the tap search")
    return syn


@dataclass
class CalibrationConfig:
    """Parsed configuration shared by all subcommands.

    ``raw`` keeps the JSON document (after any ``--seed`` override) for
    hashing; relative input paths resolve against ``base_dir``.
    """

    raw: dict
    base_dir: Path
    sample_rate: float
    distortion: object = None
    models: list = field(default_factory=list)
    transmon: TransmonParams | None = None
    coherence: CoherenceParams | None = None
    amplitude_v: float = 0.0
    baseline_v: float = 0.0
    step_duration: float | None = None
    step_delay: float = 0.0
    tau_start: float = 0.0
    tau_stop: float | None = None
    tau_step: float | None = None
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    readout_sd: float = 0.0
    seed: int = 0
    output_dir: Path | None = None

    @property
    def config_hash(self):
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def durations(self):
        if self.tau_stop is None or self.tau_step is None:
            raise ConfigError("tau_sweep: stop_s and step_s are required for this command")
        count = int(round((self.tau_stop - self.tau_start) / self.tau_step)) + 1
        if count < 3:
            raise ConfigError("tau_sweep: need at least three durations")
        return self.tau_start + self.tau_step * np.arange(count)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        top = _Section(raw)
        cfg = cls(raw=raw, base_dir=Path(base_dir), sample_rate=top.number("sample_rate_hz", positive=True))
        cfg.distortion = _model(raw.get("distortion"), "distortion")
        if "models" in raw:
            if not isinstance(raw["models"], list) or not raw["models"]:
                raise ConfigError("models: expected a non-empty list")
            for i, m in enumerate(raw["models"]):
                where = f"models[{i}]"
                if not isinstance(m, dict):
                    raise ConfigError(f"{where}: expected a model object or {{\"type\": \"identity\"}}")
                name = m.get("name", f"{m.get('type', 'model')}_{i}")
                body = {k: v for k, v in m.items() if k not in ("name", "synthesis")}
                model = None if body.get("type") == "identity" else _model(body, where)
                cfg.models.append((str(name), model, m.get("synthesis")))
        else:
            cfg.models.append(("model_0", cfg.distortion, None))

        if top.has("transmon"):
            t = top.section("transmon")
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    cfg.transmon = TransmonParams(
                        t.number("ec_hz", positive=True),
                        t.number("ej_hz", positive=True),
                        t.number("flux_per_volt", 1.0),
                        t.number("flux_offset", 0.0),
                    )
            except ValueError as exc:
                raise ConfigError(f"transmon: {exc}") from None
        if top.has("coherence"):
            c = top.section("coherence")
            try:
                cfg.coherence = CoherenceParams(c.number("t1_s", positive=True), c.number("t2_star_s", positive=True))
            except ValueError as exc:
                raise ConfigError(f"coherence: {exc}") from None

        pulse = top.section("pulse", required=False)
        cfg.amplitude_v = pulse.number("amplitude_v", 1.0)
        cfg.baseline_v = pulse.number("baseline_v", 0.0)
        if pulse.has("duration_s"):
            cfg.step_duration = pulse.number("duration_s", positive=True)
        cfg.step_delay = pulse.number("delay_s", 0.0, nonnegative=True)

        sweep = top.section("tau_sweep", required=False)
        cfg.tau_start = sweep.number("start_s", 0.0, nonnegative=True)
        if sweep.has("stop_s"):
            cfg.tau_stop = sweep.number("stop_s", positive=True)
        if sweep.has("step_s"):
            cfg.tau_step = sweep.number("step_s", positive=True)
            # durations finer than the waveform grid cannot be realized
            if cfg.tau_step * cfg.sample_rate < 1 - 1e-9:
                raise ConfigError(
                    f"tau_sweep.step_s: {cfg.tau_step:.6g} s is shorter than the sample period "
                    f"{1 / cfg.sample_rate:.6g} s"
                )
        if cfg.tau_stop is not None and cfg.tau_stop <= cfg.tau_start:
            raise ConfigError("tau_sweep.stop_s: must exceed start_s")

        cfg.synthesis = _synthesis(top.section("synthesis", required=False))
        # per-model "synthesis" entries override the global section field by field
        for i, (name, model, override) in enumerate(cfg.models):
            syn = cfg.synthesis
            if override is not None:
                if not isinstance(override, dict):
                    raise ConfigError(f"models[{i}].synthesis: expected an object")
                merged = {**(raw.get("synthesis") or {}), **override}
                syn = _synthesis(_Section(merged, f"models[{i}].synthesis"))
            cfg.models[i] = (name, model, syn)

        noise = top.section("noise", required=False)
        cfg.readout_sd = noise.number("readout_sd", 0.0, nonnegative=True)
        cfg.seed = noise.integer("seed", 0, minimum=0)

        if top.has("output_dir"):
            cfg.output_dir = Path(top.text("output_dir"))
        return cfg

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"{name}: missing section required by this command")


def load_config(path, seed=None):
    """Read and validate a config file; ``seed`` overrides ``noise.seed``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if seed is not None:
        raw.setdefault("noise", {})
        if not isinstance(raw["noise"], dict):
            raise ConfigError("noise: expected an object")
        raw["noise"]["seed"] = int(seed)
    return CalibrationConfig.from_dict(raw, path.parent)


# --------------------------------------------------------------------------
# output helpers


def _round_floats(obj):
    if isinstance(obj, float):
        short = float(fmt(obj))
        # rounding the NMSE sentinel up would overflow to infinity
        return short if math.isfinite(short) or not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


def write_json(path, data):
    with Path(path).open("w") as fh:
        json.dump(_round_floats(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


class AtomicOutput:
    """Stage files in a hidden directory under ``out`` and publish on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.stage = None

    def __enter__(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        return self

    def path(self, name):
        return self.stage / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for item in sorted(self.stage.iterdir()):
                    os.replace(item, self.out_dir / item.name)
        finally:
            shutil.rmtree(self.stage, ignore_errors=True)
        return False


def _provenance(cfg, command, started):
    return {
        "command": command,
        "config_hash": cfg.config_hash,
        "tool_version": __version__,
        "started_utc": started,
        "finished_utc": _now(),
    }


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _filter_dict(iir, fir):
    return {"iir": iir.to_dict(), "fir": None if fir is None else fir.taps.tolist()}


# --------------------------------------------------------------------------
# shared stages


def _design_iir(measured, target, syn, fit_window=None):
    """Fixed-order design when ``m_a``/``m_b`` are set, tap search otherwise."""
    if syn.fixed:
        cfg = SynthesisConfig(syn.m_a, syn.m_b, fit_window, syn.regularization)
        try:
            iir = design_inverse_iir(measured, target, cfg)
        except SingularSystemError as exc:
            # a lower order already explains the data exactly; search up to the fixed one
            log.info("fixed (%d, %d) design is singular, searching smaller orders: %s",
                     syn.m_a, syn.m_b, exc)
            capped = replace(syn, m_a=None, m_b=None, max_m_a=syn.m_a, max_m_b=syn.m_b)
            iir, design = _design_iir(measured, target, capped, fit_window)
            design["fallback"] = str(exc)
            return iir, design
        start = step_edge(target) if fit_window is None else fit_window[0]
        stop = len(target) if fit_window is None else fit_window[1]
        corrected = apply_iir(measured, iir)
        err = nmse_db(target[start:stop], corrected[start:stop])
        return iir, {"m_a": syn.m_a, "m_b": syn.m_b, "fit_nmse_db": err,
                     "met": err <= syn.threshold_db, "searched": False}
    res = search_min_taps(
        measured,
        target,
        syn.threshold_db,
        syn.max_m_a,
        syn.max_m_b,
        fit_window=fit_window,
        regularization=syn.regularization,
        allow_marginal=syn.allow_marginal,
        workers=syn.workers,
    )
    return res.filter, {
        "m_a": res.config.m_a,
        "m_b": res.config.m_b,
        "fit_nmse_db": res.nmse_db,
        "met": res.met,
        "searched": True,
        "skipped": [{"m_a": k[0], "m_b": k[1], "reason": r} for k, r in res.skipped],
    }


def _line(model, x):
    return x if model is None else apply_distortion(model, x)


def _pulse_flux(cfg, distorted):
    """Flux seen by the qubit for a distorted voltage pulse on top of the baseline."""
    volts = cfg.baseline_v + distorted.samples
    return Signal(voltage_to_flux(cfg.transmon, volts), distorted.sample_rate)


def _waveform_length(cfg):
    return int(round(cfg.tau_stop * cfg.sample_rate)) + 1


def measure_cryoscope(cfg, pulse_volts):
    """Ramsey trace for ``pulse_volts`` after the configured distortion."""
    distorted = _line(cfg.distortion, pulse_volts)
    baseline = voltage_to_flux(cfg.transmon, cfg.baseline_v)
    return simulate_cryoscope(
        cfg.transmon,
        cfg.coherence,
        _pulse_flux(cfg, distorted),
        baseline,
        cfg.durations(),
        cfg.readout_sd,
        cfg.seed,
    )


def run_cryoscope(cfg, pulse_volts):
    """Measure ``pulse_volts`` and reconstruct it; returns ``(trace, phase, response)``."""
    trace = measure_cryoscope(cfg, pulse_volts)
    phase = extract_phase(trace)
    detuning = phase_to_detuning(phase)
    baseline = voltage_to_flux(cfg.transmon, cfg.baseline_v)
    response = detuning_to_flux_response(detuning, cfg.transmon, baseline, start_time=trace.durations[0])
    return trace, phase, response


def _write_phase_csv(path, phase):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_s", "phase_rad", "quality"])
        for row in zip(phase.durations, phase.phase, phase.quality):
            w.writerow([fmt(x) for x in row])


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate_distortion(cfg, out):
    """Distorted, predistorted and corrected steps plus a report per model."""
    started = _now()
    duration = cfg.step_duration or (cfg.tau_stop if cfg.tau_stop else None)
    if duration is None:
        raise ConfigError("pulse.duration_s: required by simulate-distortion")
    reports = {}
    with AtomicOutput(out) as stage:
        for name, model, syn in cfg.models:
            try:
                step = make_step(cfg.amplitude_v, cfg.step_delay, duration, cfg.sample_rate)
                distorted = _line(model, step)
                iir, design = _design_iir(distorted, step, syn)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
            predistorted = apply_iir(step, iir)
            corrected = _line(model, predistorted)
            report = evaluate_correction(model, iir, None, step)
            write_signal_csv(stage.path(f"{name}_distorted.csv"), distorted)
            write_signal_csv(stage.path(f"{name}_predistorted.csv"), predistorted)
            write_signal_csv(stage.path(f"{name}_corrected.csv"), corrected)
            doc = {
                "model": None if model is None else model_to_dict(model),
                "design": design,
                "filters": _filter_dict(iir, None),
                "report": report.to_dict(),
                "status": "met" if design["met"] else "not-met",
            }
            doc["provenance"] = _provenance(cfg, "simulate-distortion", started)
            write_json(stage.path(f"{name}_report.json"), doc)
            reports[name] = doc
            log.info("%s: Ma=%d Mb=%d nmse %.2f dB (%s)", name, iir.m_a, iir.m_b,
                     report.nmse_db, doc["status"])
    return reports


def cmd_cryoscope(cfg, out):
    """Simulated Ramsey populations and the extracted phase for the configured pulse."""
    cfg.require("transmon", "coherence")
    durations = cfg.durations()
    if durations[-1] > 2 * cfg.coherence.t2_star:
        warnings.warn(
            f"sweep reaches {durations[-1]:.3g} s, beyond twice t2_star; phases will be noisy",
            stacklevel=2,
        )
    step = make_step(cfg.amplitude_v, 0.0, _waveform_length(cfg) / cfg.sample_rate, cfg.sample_rate)
    with AtomicOutput(out) as stage:
        trace = measure_cryoscope(cfg, step)
        with warnings.catch_warnings():
            # a zero-amplitude or fully decayed trace is valid output here
            warnings.simplefilter("ignore")
            phase = extract_phase(trace)
        write_trace_csv(stage.path("trace.csv"), trace)
        _write_phase_csv(stage.path("phase.csv"), phase)
    return trace, phase


def cmd_reconstruct(cfg, out, trace_path=None):
    """Trace CSV to phase, detuning and normalized flux response CSVs."""
    cfg.require("transmon")
    if trace_path is None:
        sec = _Section(cfg.raw).section("reconstruct")
        trace_path = cfg.resolve(sec.text("trace_csv"))
    try:
        trace = read_trace_csv(trace_path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{trace_path}: {exc}") from None
    baseline = voltage_to_flux(cfg.transmon, cfg.baseline_v)
    with AtomicOutput(out) as stage:
        phase = extract_phase(trace)
        detuning = phase_to_detuning(phase)
        response = detuning_to_flux_response(detuning, cfg.transmon, baseline,
                                             start_time=trace.durations[0])
        _write_phase_csv(stage.path("phase.csv"), phase)
        write_signal_csv(stage.path("detuning.csv"), detuning)
        write_flux_response_csv(stage.path("flux_response.csv"), response)
    return response


def _spectroscopy_map(cfg):
    spec = _Section(cfg.raw).section("spectroscopy")
    if spec.has("map_csv"):
        path = cfg.resolve(spec.text("map_csv"))
        try:
            return read_map_csv(path), spec
        except (OSError, ValueError) as exc:
            raise ConfigError(f"spectroscopy.map_csv: {exc}") from None
    sim = spec.section("simulate")
    cfg.require("transmon")
    volts = np.linspace(sim.number("v_start_v"), sim.number("v_stop_v"), sim.integer("n_voltages", minimum=2))
    freqs = np.linspace(sim.number("f_start_hz"), sim.number("f_stop_hz"), sim.integer("n_frequencies", minimum=3))
    smap = simulate_spectroscopy(
        cfg.transmon,
        volts,
        freqs,
        sim.number("linewidth_hz", positive=True),
        sim.number("contrast", 0.5, nonnegative=True),
        sim.number("noise_sd", 0.0, nonnegative=True),
        cfg.seed,
    )
    return smap, spec


def _guess(spec):
    g = spec.section("guess")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return TransmonParams(
                g.number("ec_hz", positive=True),
                g.number("ej_hz", positive=True),
                g.number("flux_per_volt", 1.0),
                g.number("flux_offset", 0.0),
            )
    except ValueError as exc:
        raise ConfigError(f"spectroscopy.guess: {exc}") from None


def cmd_fit_spectroscopy(cfg, out, map_path=None):
    """Peak extraction and flux/frequency fit on a spectroscopy map."""
    started = _now()
    if map_path is not None:
        try:
            smap = read_map_csv(map_path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{map_path}: {exc}") from None
        spec = _Section(cfg.raw).section("spectroscopy")
    else:
        smap, spec = _spectroscopy_map(cfg)
    guess = _guess(spec)
    with AtomicOutput(out) as stage:
        peaks = extract_peaks(smap, snr=spec.number("snr", 3.0, positive=True))
        with stage.path("peaks.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["voltage_v", "frequency_hz"])
            for v, f in peaks:
                w.writerow([fmt(v), fmt(f)])
        if map_path is None and not spec.has("map_csv"):
            write_map_csv(stage.path("map.csv"), smap)
        result = fit_spectroscopy(peaks, guess)
        doc = result.to_dict()
        doc["n_peaks"] = len(peaks)
        doc["skipped_voltages"] = list(peaks.skipped)
        doc["provenance"] = _provenance(cfg, "fit-spectroscopy", started)
        write_json(stage.path("fit_report.json"), doc)
    return result


def cmd_design_dpd(cfg, out, measured_path=None):
    """IIR (and optional residual FIR) design for a measured step response.

    The measured step comes from ``design.measured_csv`` (or the argument);
    without one, the configured distortion's step response is used.  The
    target defaults to the ideal step at the measured final level.
    """
    started = _now()
    sec = _Section(cfg.raw).section("design", required=False)
    if measured_path is None and sec.has("measured_csv"):
        measured_path = cfg.resolve(sec.text("measured_csv"))
    if measured_path is not None:
        try:
            measured = read_signal_csv(measured_path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"{measured_path}: {exc}") from None
    else:
        duration = cfg.step_duration or cfg.tau_stop
        if duration is None:
            raise ConfigError("pulse.duration_s: required when no measured_csv is given")
        step = make_step(cfg.amplitude_v, cfg.step_delay, duration, cfg.sample_rate)
        measured = _line(cfg.distortion, step)
    if sec.has("target_csv"):
        target = read_signal_csv(cfg.resolve(sec.text("target_csv")))
    else:
        edge = step_edge(measured)
        target = measured.with_samples(np.where(np.arange(len(measured)) >= edge, measured.samples[-1], 0.0))
    syn = cfg.synthesis
    with AtomicOutput(out) as stage:
        try:
            iir, design = _design_iir(measured, target, syn)
        except ValueError as exc:
            raise ConfigError(f"design: {exc}") from None
        corrected = apply_iir(measured, iir)
        fir = None
        if syn.fir_length:
            fir = design_residual_fir(corrected, target, syn.fir_length, regularization=syn.fir_regularization)
            corrected = apply_fir(corrected, fir)
        write_signal_csv(stage.path("corrected.csv"), corrected)
        doc = {
            "design": design,
            "filters": _filter_dict(iir, fir),
            "nmse_db": nmse_db(target, corrected),
            "status": "met" if design["met"] else "not-met",
            "provenance": _provenance(cfg, "design-dpd", started),
        }
        write_json(stage.path("filters.json"), doc)
    return iir, fir


@dataclass
class CalibrationResult:
    iir: IirFilterSpec
    fir: FirTaps | None
    report: CorrectionReport
    settle_index: int
    design: dict
    closed_loop: dict
    provenance: dict

    def to_dict(self):
        return {
            "filters": _filter_dict(self.iir, self.fir),
            "report": self.report.to_dict(),
            "settle_index": self.settle_index,
            "design": self.design,
            "closed_loop": self.closed_loop,
            "provenance": self.provenance,
        }


def calibration_settle_index(fir_length, target):
    """First sample at which the residual FIR has full memory of the step."""
    return max(step_edge(target) + 1, fir_length - 1)


def cmd_calibrate(cfg, out):
    """Full loop: measure, reconstruct, design IIR then FIR, verify.

    Filters run at the waveform rate, so the duration step must equal the
    sample period.  The report comes from :func:`evaluate_correction` on the
    configured distortion; ``closed_loop`` holds the same deviations measured
    again through the simulated Ramsey experiment with the predistorted pulse.
    """
    started = _now()
    cfg.require("transmon", "coherence")
    if cfg.tau_step is None or abs(cfg.tau_step * cfg.sample_rate - 1) > 1e-9:
        raise ConfigError("tau_sweep.step_s: calibrate needs the step to equal 1/sample_rate_hz")
    if cfg.tau_start != 0.0:
        raise ConfigError("tau_sweep.start_s: calibrate needs the sweep to start at 0")
    if cfg.amplitude_v == 0.0:
        raise ConfigError("pulse.amplitude_v: calibrate needs a nonzero pulse")
    syn = cfg.synthesis
    n = _waveform_length(cfg)
    fs = cfg.sample_rate
    step = make_step(cfg.amplitude_v, 0.0, n / fs, fs)
    baseline = voltage_to_flux(cfg.transmon, cfg.baseline_v)

    with AtomicOutput(out) as stage:
        _, _, uncorrected = run_cryoscope(cfg, step)
        # durations sit on the waveform grid, so the exact rate is known
        measured = Signal(uncorrected.excursion(baseline).samples, fs)
        target = make_step(1.0, 0.0, n / fs, fs)
        try:
            iir, design = _design_iir(measured, target, syn, fit_window=(0, n))
            fir = None
            if syn.fir_length:
                fir = design_residual_fir(apply_iir(measured, iir), target, syn.fir_length,
                                          regularization=syn.fir_regularization)
        except ValueError as exc:
            raise ConfigError(f"synthesis: {exc}") from None
        settle = syn.settle_index
        if settle is None:
            settle = calibration_settle_index(syn.fir_length, target)
        report = evaluate_correction(cfg.distortion, iir, fir, target, settle)

        # re-measure with the predistorted pulse: the triplet of flux curves
        curves = {"uncorrected": uncorrected}
        pre_iir = apply_iir(step, iir)
        _, _, curves["iir"] = run_cryoscope(cfg, pre_iir)
        if fir is not None:
            _, _, curves["iir_fir"] = run_cryoscope(cfg, apply_fir(pre_iir, fir))
        closed = {}
        for name, resp in curves.items():
            write_flux_response_csv(stage.path(f"flux_{name}.csv"), resp)
            # deviation from the commanded level, not the window mean
            delta = resp.raw_flux - baseline
            level = cfg.transmon.flux_per_volt * cfg.amplitude_v
            closed[name] = {"max_dev": max_deviation(Signal(delta, fs), level, settle)}
        result = CalibrationResult(
            iir, fir, report, settle, design, closed, _provenance(cfg, "calibrate", started)
        )
        write_json(stage.path("calibration.json"), result.to_dict())
    log.info("calibrate: IIR (%d, %d) max dev %.4g, FIR max dev %s", iir.m_a, iir.m_b,
             report.max_dev_iir, report.max_dev_fir)
    return result


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "simulate-distortion": cmd_simulate_distortion,
    "cryoscope": cmd_cryoscope,
    "reconstruct": cmd_reconstruct,
    "fit-spectroscopy": cmd_fit_spectroscopy,
    "design-dpd": cmd_design_dpd,
    "calibrate": cmd_calibrate,
}

# subcommands taking an optional input file
_INPUT_HELP = {
    "reconstruct": "trace CSV (overrides reconstruct.trace_csv)",
    "fit-spectroscopy": "spectroscopy map CSV (overrides spectroscopy.map_csv)",
    "design-dpd": "measured step CSV (overrides design.measured_csv)",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fluxdpd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
        p.add_argument("--seed", type=int, help="override noise.seed")
        p.add_argument("--verbose", action="store_true")
        if name in _INPUT_HELP:
            p.add_argument("input", nargs="?", help=_INPUT_HELP[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = load_config(args.config, args.seed)
        out = args.out or cfg.output_dir
        if out is None:
            raise ConfigError("output_dir: give --out or set output_dir in the config")
        fn = COMMANDS[args.command]
        if args.command in _INPUT_HELP:
            fn(cfg, out, getattr(args, "input", None))
        else:
            fn(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutOfRangeError as exc:
        print(f"reconstruction out of range: {exc}", file=sys.stderr)
        return EXIT_RANGE
    except ConvergenceError as exc:
        print(f"fit did not converge: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IdentifiabilityError as exc:
        print(f"not identifiable: {exc}", file=sys.stderr)
        return EXIT_IDENTIFIABILITY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
