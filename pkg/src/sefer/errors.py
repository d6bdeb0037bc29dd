"""Exception hierarchy and CLI exit codes.

Every error the pipeline raises deliberately derives from SeferError so the
CLI can map failures onto stable exit codes: configuration problems exit 2,
I/O problems exit 3, data/contract problems exit 4.
"""


class SeferError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SeferError):
    """Invalid configuration or invalid command usage."""


class FormatError(SeferError):
    """Malformed input file (annotation, manifest, label map)."""


class IntegrityError(SeferError):
    """Inconsistent data, e.g. duplicate samples across merged manifests."""


class DomainError(SeferError):
    """Operation is undefined for the supplied values."""


class ContractError(SeferError):
    """An internal call contract was violated (shape, range, mode)."""


class CheckpointError(SeferError):
    """Checkpoint could not be loaded or mapped onto the model."""


class TrainingError(SeferError):
    """Training aborted, e.g. a non-finite gradient."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, SeferError):
        return EXIT_DATA
    raise exc
