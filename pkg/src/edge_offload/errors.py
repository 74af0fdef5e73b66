"""Exception types raised across the package."""


class EdgeOffloadError(Exception):
    pass


class EmptyInput(EdgeOffloadError, ValueError):
    pass


class EmptyCategory(EdgeOffloadError, ValueError):
    pass


class EmptyProfile(EdgeOffloadError, ValueError):
    pass


class EmptyService(EdgeOffloadError, ValueError):
    pass


class NoLivePods(EdgeOffloadError, RuntimeError):
    pass


class OutOfOrderSample(EdgeOffloadError, ValueError):
    """A metrics sample did not advance its pod's timestamp."""


class EmptyEventQueue(EdgeOffloadError, RuntimeError):
    pass


class BackendUnavailable(EdgeOffloadError, RuntimeError):
    pass


class BindFailure(EdgeOffloadError, OSError):
    pass


class ConservationError(EdgeOffloadError, AssertionError):
    """Task accounting does not balance (generated != completed + dropped + in flight)."""


class ConfigInvalid(EdgeOffloadError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class MissingArtifacts(EdgeOffloadError, FileNotFoundError):
    pass
