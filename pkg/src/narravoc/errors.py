"""Error hierarchy shared across the engine.

Every error carries a stable ``code`` string so the CLI can map failures
to machine-readable identifiers without string-matching messages.
"""

from __future__ import annotations


class NarravocError(Exception):
    """Base class for all domain errors."""

    code = "error"


class MissingScene(NarravocError):
    code = "missing-scene"

    def __init__(self, text: str):
        super().__init__(f"prefix narration has no scene label: {text!r}")
        self.text = text


class FormatError(NarravocError):
    """A persisted file violates its format contract."""

    code = "format-error"

    def __init__(self, reason: str, line: int | None = None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"{reason}{loc}")
        self.reason = reason
        self.line = line


class AlignmentError(NarravocError):
    code = "alignment-error"


class EmptyClip(NarravocError):
    code = "empty-clip"


class DegenerateClip(NarravocError):
    code = "degenerate-clip"


class EncoderUnavailable(NarravocError):
    code = "encoder-unavailable"


class EmptyScene(NarravocError):
    code = "empty-scene"

    def __init__(self, scene_id: int):
        super().__init__(f"scene {scene_id} owns no prefix entries")
        self.scene_id = scene_id


class SeqTooLong(NarravocError):
    code = "seq-too-long"


class DimMismatch(NarravocError):
    code = "dim-mismatch"


class NonFiniteLoss(NarravocError):
    code = "non-finite-loss"


class TooFewStreams(NarravocError):
    code = "too-few-streams"


class ClientUnavailable(NarravocError):
    code = "client-unavailable"


class ClientTimeout(NarravocError):
    code = "client-timeout"


class ClientProtocolError(NarravocError):
    code = "client-protocol-error"


class MismatchedRuns(NarravocError):
    code = "mismatched-runs"
