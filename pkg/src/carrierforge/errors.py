"""Exception hierarchy shared by every carrierforge module."""


class CarrierForgeError(Exception):
    """Base class for all errors raised by carrierforge."""


class CueError(CarrierForgeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrackSplitError(CarrierForgeError):
    pass


class IsoError(CarrierForgeError):
    pass


class ExtractionCollision(IsoError):
    pass


class ForgeError(CarrierForgeError, ValueError):
    pass


class ManifestError(CarrierForgeError):
    pass


class ManifestFormatError(ManifestError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BagError(CarrierForgeError):
    pass


class PipelineError(CarrierForgeError):
    pass


class MergeConflict(PipelineError):
    pass


class LedgerError(CarrierForgeError):
    pass


class UnknownCarrier(LedgerError, KeyError):
    def __str__(self) -> str:
        return f"unknown carrier: {self.args[0]}"


class IllegalTransition(LedgerError):
    pass


class LedgerLocked(LedgerError):
    pass
