class RangeCoderError(ValueError):
    """Malformed coder input or an undecodable stream.

    ``position`` is the byte offset (decode) or symbol index (encode) of the
    first inconsistency, ``-1`` when not tied to a position.
    """

    def __init__(self, message, position=-1):
        super().__init__(message)
        self.position = position


class BitstreamError(ValueError):
    """A scene bitstream that cannot be unpacked."""
