"""REML fitting and bootstrap inference for two-level linear mixed models."""

from .exceptions import (
    LeverageError,
    MultilevelError,
    NumericalError,
    RefitFailureError,
    SingularDesignError,
    ValidationError,
)
from .inference import IntervalEstimate, percentile_interval, summarize
from .model import (
    FitOptions,
    FitResult,
    GroupBlock,
    GroupedDataset,
    VarianceComponents,
    fit_reml,
    parameter_names,
)
from .resampling import (
    AuxiliaryLaw,
    Cases,
    CasesMode,
    HccmeForm,
    Parametric,
    RefitPolicy,
    ReplicateMatrix,
    Residual,
    Wild,
    run_bootstrap,
)
from .study import CoverageReport, Scenario, run_study

__version__ = "0.1.0"
