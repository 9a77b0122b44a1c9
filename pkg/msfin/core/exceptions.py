from typing import Optional


class MsfinError(Exception):
    """Base class for every error raised by the msfin package."""


class ShapeError(MsfinError, ValueError):
    """Operator precondition failure (extents, divisibility, broadcast)."""


class TapeError(MsfinError):
    """Autograd misuse: non-scalar loss, loss not recorded on the tape."""


class ConfigurationError(MsfinError, ValueError):
    """Invalid or unknown configuration key/value."""


class ImageError(MsfinError):
    """Unreadable image, unsupported bit depth or image too small."""


class DatasetError(MsfinError):
    """Missing or empty dataset directory."""


class CheckpointError(MsfinError):
    def __init__(self, message: str, path: Optional[str] = None, field: Optional[str] = None):
        self.path = path
        self.field = field
        details = []
        if path:
            details.append(f"file={path}")
        if field:
            details.append(f"field={field}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class TrainingDivergedError(MsfinError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"Non-finite loss {loss!r} at step {step}")
