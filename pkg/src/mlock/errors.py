"""Exception types shared across the toolkit."""


class MlockError(Exception):
    """Base class for all domain errors."""

    exit_code = 1


class SchemaError(MlockError):
    """Byte stream or tensor layout does not match the declared schema."""


class FormatError(MlockError):
    """Container file is malformed. `reason` is one of the documented codes."""

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason  # "bad-magic" | "version" | "truncated" | "checksum"
        super().__init__(message or reason)


class CapabilityError(MlockError):
    """Required hardware capability (e.g. a tick counter) is unavailable."""


class UnstableFingerprint(MlockError):
    """Repeated measurements did not reach a majority value."""

    def __init__(self, spread):
        self.spread = dict(spread)
        super().__init__(f"no majority across trials; spread={self.spread}")


class CapacityError(MlockError):
    """Source too small or table size beyond supported limits."""


class RecoveryFailed(MlockError):
    """Fuzzy extractor key check failed after error correction."""


class DescriptorError(MlockError):
    """Locked-model descriptor is missing data needed to unlock."""


class SampleError(MlockError):
    """Not enough samples for the requested statistical test."""


class TrainingDiverged(MlockError):
    """Loss became non-finite during training."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"loss diverged at step {step}")


class NotFound(MlockError):
    """Brute force finished without a confirmed key."""

    def __init__(self, best_candidate, best_accuracy: float):
        self.best_candidate = best_candidate
        self.best_accuracy = best_accuracy
        super().__init__(
            f"no candidate above confirmation threshold "
            f"(best {best_candidate!r} at {best_accuracy:.3f})"
        )


class OutlierSaturationWarning(UserWarning):
    """Gaussian pre-transform clamped outliers; indistinguishability degrades."""
