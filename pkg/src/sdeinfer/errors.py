"""Exception hierarchy shared across the package."""


class SDEInferError(Exception):
    """Base class for all package errors."""


class SimulationError(SDEInferError):
    """Euler-Maruyama integration produced non-finite states."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class InsufficientWindowSamples(SDEInferError):
    """Too few transition pairs fall inside the IA-KDE conditioning window."""

    def __init__(self, n_window, required):
        super().__init__(
            f"only {n_window} samples inside the conditioning window "
            f"(need at least {required}); widen the window or simulate more pairs"
        )
        self.n_window = n_window
        self.required = required


class TrainingError(SDEInferError):
    """Conditional density training diverged."""


class EvaluationError(SDEInferError):
    """A log-likelihood evaluation failed at a given parameter vector."""

    def __init__(self, theta, cause):
        super().__init__(f"log-likelihood evaluation failed at theta={list(theta)}: {cause}")
        self.theta = theta
        self.cause = cause


class GPFitError(SDEInferError):
    """Covariance matrix could not be factorized even after jitter."""


class ConfigError(SDEInferError):
    """Invalid run configuration."""


class PipelineError(SDEInferError):
    """A pipeline stage failed."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
