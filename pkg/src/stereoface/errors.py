"""Exception types shared across the package."""


class PgmDecodeError(ValueError):
    """Raised when a PGM byte stream cannot be parsed.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class FileFormatError(ValueError):
    """Raised when a binary artifact (weight file, raw map, gallery) is malformed."""


class ProviderError(RuntimeError):
    """Raised when an embedding provider fails.

    Kept distinct from an authentication outcome so infrastructure faults
    never masquerade as a rejected face.
    """
