"""Exception hierarchy; ``category`` is what the CLI reports on failure."""


class EndpointingError(Exception):
    category = "internal"
    exit_code = 1


class ValidationError(EndpointingError, ValueError):
    category = "validation"
    exit_code = 4


class ShapeError(ValidationError):
    category = "shape"


class ContractError(EndpointingError, RuntimeError):
    category = "contract"
    exit_code = 4


class TrainingError(EndpointingError, RuntimeError):
    category = "training"
    exit_code = 5


class ConfigError(EndpointingError, ValueError):
    category = "config"
    exit_code = 2


class CorpusError(EndpointingError, ValueError):
    """Malformed, inconsistent or version-incompatible corpus files."""

    category = "corpus"
    exit_code = 3


class InsufficientSampleError(EndpointingError, ValueError):
    category = "insufficient_sample"
    exit_code = 4
