"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the command line
front end can emit structured diagnostics. ``DataError`` subclasses map to
exit status 2, ``ConvergenceError`` subclasses to exit status 3.
"""


class MsmError(Exception):
    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def as_dict(self):
        out = {"error": self.code, "message": self.message}
        out.update({k: _plain(v) for k, v in self.details.items()})
        return out


def _plain(v):
    if isinstance(v, (list, tuple, set)):
        return [_plain(x) for x in v]
    if hasattr(v, "item"):
        return v.item()
    return v


class DataError(MsmError):
    code = "data_error"


class ConvergenceError(MsmError):
    code = "not_converged"


# ingestion
class MissingColumn(DataError):
    code = "missing_column"


class UnknownStateLabel(DataError):
    code = "unknown_state_label"


class NonNumericTime(DataError):
    code = "non_numeric_time"


class EmptyFile(DataError):
    code = "empty_file"


class InvalidStateSpace(DataError):
    code = "invalid_state_space"


class InvalidRecord(DataError):
    code = "invalid_record"


# queries
class UnknownState(DataError):
    code = "unknown_state"


class DisallowedTransition(DataError):
    code = "disallowed_transition"


class NeverAtRisk(DataError):
    code = "never_at_risk"


class InconsistentFollowingSet(DataError):
    code = "inconsistent_following_set"


class TauOutOfRange(DataError):
    code = "tau_out_of_range"


class InvalidLevel(DataError):
    code = "invalid_level"


# regression
class DegenerateCovariate(DataError):
    code = "degenerate_covariate"


class NoEvents(DataError):
    code = "no_events"


class MixedTimescale(DataError):
    code = "mixed_timescale"


class MonotoneLikelihood(ConvergenceError):
    code = "monotone_likelihood"


class NotConverged(ConvergenceError):
    code = "not_converged"


# panel / matrix exponential
class InvalidGenerator(DataError):
    code = "invalid_generator"


class ImpossibleTransitionObserved(DataError):
    code = "impossible_transition_observed"


class NonIdentifiable(ConvergenceError):
    code = "non_identifiable"


# pseudo-values / GEE
class DelayedEntryUnsupported(DataError):
    code = "delayed_entry_unsupported"


class T0OutOfRange(DataError):
    code = "t0_out_of_range"


class SingularDesign(DataError):
    code = "singular_design"


class NoCensoringInformation(DataError):
    code = "no_censoring_information"


class WeightOutOfSupport(DataError):
    code = "weight_out_of_support"


# frailty
class NonFiniteLikelihood(DataError):
    code = "non_finite_likelihood"


class InvalidTransition(DataError):
    code = "invalid_transition"


# simulation
class InvalidSpec(DataError):
    code = "invalid_spec"
