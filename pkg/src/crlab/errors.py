"""Exception types raised by crlab."""


class CRLabError(Exception):
    """Base class for all crlab errors."""


class DegenerateChart(CRLabError):
    pass


class SamplingTooCoarse(CRLabError):
    pass


class EigenvalueTie(CRLabError):
    pass


class NewtonDiverged(CRLabError):
    pass


class EmptyGrid(CRLabError):
    pass


class DegreeOutOfRange(CRLabError):
    pass


class BadCoordinateFrame(CRLabError):
    pass


class OutOfChart(CRLabError):
    pass


class SingularPoint(CRLabError):
    pass


class CoverMismatch(CRLabError):
    pass


class ThresholdAmbiguous(CRLabError):
    pass


class ContractionViolated(CRLabError):
    def __init__(self, msg, norm=None):
        super().__init__(msg)
        self.norm = norm


class RankDeficient(CRLabError):
    pass


class NoConvergence(CRLabError):
    pass


class ConfigInvalid(CRLabError):
    def __init__(self, msg, path=None):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.msg = msg
        self.path = path


class LerayViolation(CRLabError):
    pass
