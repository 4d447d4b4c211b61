"""Exception types shared across the package."""


class CoverageError(ValueError):
    """The behavior policy never visits a state-action pair the computation needs."""


class DivergenceError(RuntimeError):
    """An iterative solve produced a non-finite objective or an out-of-range estimate."""


class RankDeficiencyError(RuntimeError):
    """A closed-form solve hit a singular system.

    Carries the dimension of the null space of the offending matrix so the
    caller can tell a borderline conditioning problem from a structural one.
    """

    def __init__(self, message: str, null_dim: int):
        super().__init__(f"{message} (null-space dimension {null_dim})")
        self.null_dim = null_dim


class DegenerateRowError(ValueError):
    """A reconstructed transition row has no positive mass to renormalize."""


class ConfigError(ValueError):
    """An experiment configuration file is missing or inconsistent."""
