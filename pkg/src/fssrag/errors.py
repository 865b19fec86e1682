"""Exception hierarchy shared by every layer of the retrieval service."""


class FssRagError(Exception):
    """Base class for all errors raised by this package."""


class FieldRangeError(FssRagError, ValueError):
    """A real value cannot be encoded in the configured field."""


class ShareUsageError(FssRagError, ValueError):
    """Shares from mismatched parties were combined."""


class ConfigurationError(FssRagError, ValueError):
    pass


class DecodeError(FssRagError, ValueError):
    """Malformed bytes for a key, share vector, frame or file."""


class KeyReuseError(FssRagError, RuntimeError):
    """A single-use comparison key was asked to mask a second value."""


class ProtocolError(FssRagError, RuntimeError):
    """Out-of-order message, malformed payload, peer timeout or step mismatch."""


class ProtocolAbort(FssRagError, RuntimeError):
    """The servers aborted the session (malicious user or protocol failure).

    ``reason`` is one of ``"binary-check"``, ``"count-bound"`` or
    ``"protocol-error"``; ``phase`` is the session phase when it happened.
    """

    def __init__(self, reason: str, phase: str, detail: str = ""):
        self.reason = reason
        self.phase = phase
        self.detail = detail
        msg = f"session aborted in phase {phase!r}: {reason}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ServerInconsistencyError(FssRagError, RuntimeError):
    """The two servers returned shares that do not reconstruct to a 0/1 vector."""


class IngestionError(FssRagError, ValueError):
    pass


class BundleError(FssRagError):
    code = "bundle"


class CorruptBundleError(BundleError, ValueError):
    code = "corrupt"


class WrongPartyError(BundleError, ValueError):
    code = "wrong-party"


class MaterialExhaustedError(BundleError, RuntimeError):
    code = "exhausted"
