"""Self-sizing attention: residual directional energy, a bidirectional gate, and growth/prune control."""

from .exceptions import (
    ConvergenceError,
    DegenerateSpectrumError,
    DimensionError,
    PreconditionError,
    SaturationError,
    StepSizeError,
)
from .spectra import (
    BD,
    PCA,
    CapturedBasis,
    ComplexityReport,
    SpectralSummary,
    complexity_index,
    decay_envelope,
    deflation_oracle,
    pac_sample_bound,
    predict_head_count,
    residual_operator,
    spectral_summary,
)
from .gate import GateState, gate_step, init_gate, run_to_convergence

__version__ = "0.1.0"
