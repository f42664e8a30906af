"""Exception hierarchy shared by the analysis pipeline and the runtime policy."""


class LoadLordError(Exception):
    """Base class for every error raised by this package."""


# image model
class MalformedImage(LoadLordError):
    pass


class NoExecutableSegment(LoadLordError):
    pass


class UnsupportedMachine(LoadLordError):
    pass


class OutOfRange(LoadLordError):
    pass


# function map / gadget index
class EmptyCodeRegion(LoadLordError):
    pass


class OverlappingFunctions(LoadLordError):
    pass


class ParseError(LoadLordError):
    """A line of a text input (listing, seeds, trace, config) could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# policy engine
class InconsistentArtifacts(LoadLordError):
    pass


class UnknownAddress(LoadLordError):
    pass


class EmptyResidentSet(LoadLordError):
    pass


class StrictViolation(LoadLordError):
    """Raised in strict mode on the first illegal load address."""

    def __init__(self, addr: int, origin: str = "program"):
        self.addr = addr
        self.origin = origin
        super().__init__(f"illegal load address {addr:#x} ({origin})")


# simulator
class ZeroTotal(LoadLordError):
    pass


# live supervisor
class PlatformUnsupported(LoadLordError):
    pass


class SpawnFailure(LoadLordError):
    pass


class UnknownTrapAddress(LoadLordError):
    pass


class RemoteMemoryFailure(LoadLordError):
    pass
