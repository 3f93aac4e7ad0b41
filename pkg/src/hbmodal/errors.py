"""Exception types.

Every error carries a stable string ``code`` so callers (and the CLI exit
status mapping) can branch on it without parsing messages.
"""


class HBMError(Exception):
    """Base class for all library errors."""

    code = "hbm-error"
    #: numerical failures map to CLI exit status 1, config/IO to 2
    exit_status = 1

    def __init__(self, message="", **context):
        self.context = context
        if context:
            extra = ", ".join(f"{k}={v!r}" for k, v in context.items())
            message = f"{message} ({extra})" if message else extra
        super().__init__(f"[{self.code}] {message}")


def _make(name, code, doc, base=HBMError):
    cls = type(name, (base,), {"code": code, "__doc__": doc})
    return cls


InadmissibleParameters = _make(
    "InadmissibleParameters", "inadmissible-parameters", "Assembled mass matrix is not positive definite.")
DegenerateSpectrum = _make(
    "DegenerateSpectrum", "degenerate-spectrum", "Eigen-solve failed or returned repeated eigenvalues.")
ModeMatchingFailed = _make(
    "ModeMatchingFailed", "mode-matching-failed", "An experimental mode has no analytical partner above the MAC floor.")
NonIdentifiableDirection = _make(
    "NonIdentifiableDirection", "non-identifiable-direction", "Two covariances are singular in a common direction.")
InvalidSpectralModel = _make(
    "InvalidSpectralModel", "invalid-spectral-model", "Theoretical PSD matrix is not positive definite.")
ModalIdFailed = _make(
    "ModalIdFailed", "modal-id-failed", "Per-band modal identification did not converge.")
FlatLikelihood = _make(
    "FlatLikelihood", "flat-likelihood", "Hessian of the spectral NLL is not positive definite.")
SensitivityDegenerate = _make(
    "SensitivityDegenerate", "sensitivity-degenerate", "Eigenvalue too close to a neighbour for derivatives.")
UnobservableMode = _make(
    "UnobservableMode", "unobservable-mode", "Mode has (numerically) zero amplitude at the observed DOFs.")
InsufficientDatasets = _make(
    "InsufficientDatasets", "insufficient-datasets", "Too few datasets for an ensemble estimate.")
DegenerateFrequencyPosterior = _make(
    "DegenerateFrequencyPosterior", "degenerate-frequency-posterior",
    "Both identification and prediction-error frequency variances are zero.")
ModeshapeEstepFailed = _make(
    "ModeshapeEstepFailed", "modeshape-estep-failed", "Constrained mode-shape E-step has no admissible solution.")
Mstep1Failed = _make(
    "Mstep1Failed", "mstep1-failed", "Structural-parameter minimization failed.")
NonIdentifiableTheta = _make(
    "NonIdentifiableTheta", "non-identifiable-theta", "Hessian of J is not positive definite at the optimum.")
TemperingCollapse = _make(
    "TemperingCollapse", "tempering-collapse", "Importance weights degenerated during tempering.")


class ConfigError(HBMError):
    """Invalid configuration or unreadable/ill-formed input file."""

    code = "config-error"
    exit_status = 2


class InsufficientDatasetsWarning(UserWarning):
    """Ensemble variance estimates from fewer than two datasets are degenerate."""
