"""Exception hierarchy.

Every error raised by the library derives from :class:`RouterError` so the
CLI can map domain failures to exit code 1 in one place.
"""


class RouterError(Exception):
    """Base class for domain errors."""


# pool / config
class PoolConfigError(RouterError):
    pass


class DuplicateName(PoolConfigError):
    pass


class NegativePrice(PoolConfigError):
    pass


class LocalWithNonzeroPrice(PoolConfigError):
    pass


class PoolTooSmall(RouterError):
    pass


class EmptyGroup(RouterError):
    pass


# decomposition
class MissingTokenCounts(RouterError):
    pass


class MissingCoherence(RouterError):
    pass


class JudgeUnavailable(RouterError):
    pass


class EmptySampleSet(RouterError):
    pass


class GeneratorFailure(RouterError):
    pass


# allocation
class EmptyProbSequence(RouterError):
    pass


class InvalidThresholds(RouterError):
    pass


class LimitZero(RouterError):
    pass


# execution
class ExecutorFailure(RouterError):
    pass


class StepFailure(ExecutorFailure):
    pass


class StrongModelFailure(ExecutorFailure):
    pass


# grpo
class GroupTooSmall(RouterError):
    pass


class NonpositiveRatio(RouterError):
    pass


class SupportMismatch(RouterError):
    pass


class EmptyBatch(RouterError):
    pass


class NonfiniteGradient(RouterError):
    pass


class EnvFailure(RouterError):
    pass


# metrics
class EmptyTraces(RouterError):
    pass


class LabelMismatch(RouterError):
    pass


# sim
class InstanceTooLarge(RouterError):
    pass


# backend
class BackendError(ExecutorFailure):
    pass


class AuthError(BackendError):
    pass


class RateLimited(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class TimeoutExhausted(BackendError):
    pass


class CassetteMiss(BackendError):
    pass


class CorruptCassette(BackendError):
    pass
