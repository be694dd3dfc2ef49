"""Shared exception types."""


class FormatError(Exception):
    """A binary or text artifact failed to parse (bad magic, truncation,
    fingerprint mismatch). Carries enough context to locate the fault."""

    def __init__(self, message, *, path=None, offset=None, line=None):
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__(": ".join([parts[0], ", ".join(parts[1:])]) if len(parts) > 1 else message)
        self.path = path
        self.offset = offset
        self.line = line


class TrainingDiverged(Exception):
    """Training produced a non-finite loss."""
