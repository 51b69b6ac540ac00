"""Flux-line digital predistortion toolkit.

Models the classical distortions of a flux-control chain, simulates the
qubit-side Cryoscope measurement, reconstructs the flux step response and
synthesizes IIR + FIR predistortion filters that linearize it.
"""

from .signal_core import (
    NMSE_DB_FLOOR,
    FirTaps,
    IirFilterSpec,
    Signal,
    apply_fir,
    apply_iir,
    make_step,
    max_deviation,
    nmse_db,
)
from .distortion import (
    BiasTeeHighPass,
    Cascade,
    DigitalFilterRealization,
    ExponentialOvershoot,
    SecondOrderAwg,
    apply_distortion,
    discretize,
    step_response,
)
from .synthesis import (
    CorrectionReport,
    SynthesisConfig,
    TapSearchResult,
    design_inverse_iir,
    design_residual_fir,
    evaluate_correction,
    search_min_taps,
)
from .transmon import (
    CoherenceParams,
    CryoscopeTrace,
    SpectroscopyMap,
    TransmonParams,
    flux_to_frequency,
    frequency_to_flux,
    simulate_cryoscope,
    simulate_spectroscopy,
    voltage_to_flux,
)
from .reconstruction import (
    FitResult,
    FluxResponse,
    PhaseSeries,
    detuning_to_flux_response,
    extract_peaks,
    extract_phase,
    fit_spectroscopy,
    phase_to_detuning,
    unwrap_phase,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    IdentifiabilityError,
    OutOfRangeError,
    SingularSystemError,
)

__version__ = "0.1.0"
