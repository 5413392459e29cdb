"""Exception hierarchy shared by all modules."""


class KendallError(Exception):
    """Base class for every error raised by the package."""


class InvalidInput(KendallError, ValueError):
    pass


class DegenerateConfiguration(InvalidInput):
    """All landmarks coincide, so there is no pre-shape."""


class WrongDimension(InvalidInput):
    pass


class ParseError(InvalidInput):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class RankDeficient(KendallError):
    """A Sylvester operator has two or more vanishing eigenvalues."""


class SingularStratum(RankDeficient):
    """A pre-shape of rank below m - 1."""


class TransportThroughSingularity(SingularStratum):
    pass


class TransportFailed(KendallError):
    pass


class ClosedFormInapplicable(KendallError):
    pass


class CutLocus(KendallError):
    """Antipodal points: log and slerp are undefined."""


class NonUniqueRotation(KendallError):
    """The optimal rotation between two pre-shapes is not unique."""


class NonConvergence(KendallError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateData(KendallError):
    pass


class GroupTooSmall(InvalidInput):
    pass
