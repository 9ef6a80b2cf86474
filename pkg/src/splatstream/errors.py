"""Exception types shared across the package.

Two broad categories matter for the CLI exit-code contract: input/config
problems (exit 2) and runtime failures (exit 1). Everything here derives
from SplatStreamError so callers can catch the whole family.
"""


class SplatStreamError(Exception):
    """Base class for all package errors."""


class InputError(SplatStreamError):
    """Bad user input: files, config values, malformed data. CLI exit 2."""


class InvalidParameterError(InputError):
    """An argument violates an operation's preconditions."""


class TrainingDivergedError(SplatStreamError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class AlignmentGapError(SplatStreamError):
    def __init__(self, modality: str, gap_ns: int, window_ns: int):
        super().__init__(
            f"no {modality} sample within {window_ns} ns window (nearest gap {gap_ns} ns)"
        )
        self.modality = modality
        self.gap_ns = gap_ns
        self.window_ns = window_ns


class StreamEndedError(SplatStreamError):
    """Connection dropped mid-stream; carries partial-delivery counts."""

    def __init__(self, yielded: int, skipped: int, reason: str = "connection reset"):
        super().__init__(f"{reason} after {yielded} samples ({skipped} skipped)")
        self.yielded = yielded
        self.skipped = skipped


class UnsupportedCameraModelError(InputError):
    def __init__(self, model: str):
        super().__init__(f"unsupported camera model: {model}")
        self.model = model


class ColmapParseError(InputError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class InsufficientOverlapError(InputError):
    def __init__(self, pairs: int, needed: int = 3):
        super().__init__(f"only {pairs} associated pose pairs, need >= {needed}")
        self.pairs = pairs


class ModelFormatError(InputError):
    """Structurally invalid model file: bad magic/version/offsets/bounds."""


class ModelValidationError(InputError):
    """Model file parsed but contains invalid values (NaN parameters)."""

    def __init__(self, message: str, indices=None):
        super().__init__(message)
        self.indices = list(indices) if indices is not None else []


class PlySchemaError(InputError):
    def __init__(self, prop: str):
        super().__init__(f"PLY file is missing required property: {prop}")
        self.property = prop


class ResyncRequiredError(SplatStreamError):
    """Client revision does not match a delta's base; request a snapshot."""

    def __init__(self, client_revision: int, revision_from: int):
        super().__init__(
            f"client at revision {client_revision}, delta expects {revision_from}"
        )
        self.client_revision = client_revision
        self.revision_from = revision_from


class ProtocolError(SplatStreamError):
    """Peer sent something that violates the update protocol."""
