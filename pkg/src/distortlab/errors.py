"""Exception types shared across the package."""


class DistortLabError(Exception):
    """Base class for all package-specific errors."""


class ParseError(DistortLabError):
    """A model file or decoder string could not be parsed."""


class NormalizationError(DistortLabError):
    """A probability row deviates from unit mass beyond tolerance."""

    def __init__(self, context_key, total, tolerance):
        self.context_key = context_key
        self.total = total
        self.tolerance = tolerance
        super().__init__(
            f"row {context_key!r} has mass {total!r} "
            f"(deviates from 1 by more than {tolerance:g})"
        )


class UnknownContext(DistortLabError):
    """A table model has no row (and no default row) for a context."""


class RemoteError(DistortLabError):
    """A remote model endpoint timed out or replied malformed."""


class EmptyCorpus(DistortLabError):
    """Training text contains no units."""


class UnsupportedKind(DistortLabError):
    """The decoder kind does not support the requested operation."""


class DegenerateDistribution(DistortLabError):
    """Renormalization impossible: the selected mass is zero."""


class InvalidTau(DistortLabError):
    """Temperature parameter outside (0, 1]."""


class SupportTooLarge(DistortLabError):
    """Exact enumeration would exceed the configured cap."""

    def __init__(self, estimated, cap):
        self.estimated = estimated
        self.cap = cap
        super().__init__(f"support holds ~{estimated} sequences, cap is {cap}")


class RejectionBudgetExceeded(DistortLabError):
    """No acceptance within the attempt budget."""

    def __init__(self, stats):
        self.stats = stats
        super().__init__(
            f"no acceptance after {stats.attempts} attempts "
            f"({stats.accepted} accepted so far)"
        )


class UnsupportedOrder(DistortLabError):
    """Transfer-operator analysis requires order 0 or 1 unless lifted."""


class NonConvergence(DistortLabError):
    """Power iteration failed to converge within the iteration cap."""


class MissingTrace(DistortLabError):
    """A generation record lacks the per-step normalizer trace."""


class ZeroMass(DistortLabError):
    """A sequence lies outside the decoder's support."""


class SupportViolation(DistortLabError):
    """A measure puts mass outside the reference support."""


class MixedDecoders(DistortLabError):
    """Records from different decoders were mixed in one estimate."""


class NoMatch(DistortLabError):
    """No grid point reaches the calibration tolerance."""

    def __init__(self, residuals):
        self.residuals = residuals
        super().__init__(f"calibration residuals {residuals} exceed tolerance")
