"""Exception hierarchy shared by every module."""


class ProbTriError(Exception):
    """Base class for all errors raised by probtri."""


class NotARotation(ProbTriError, ValueError):
    pass


class BehindCamera(ProbTriError, ValueError):
    pass


class DegenerateRig(ProbTriError, ValueError):
    pass


class DegenerateSamples(ProbTriError, ValueError):
    pass


class DegenerateConfiguration(ProbTriError, ValueError):
    pass


class CheiralityAmbiguous(ProbTriError, ValueError):
    pass


class InsufficientInliers(ProbTriError, RuntimeError):
    pass


class ParallelRays(ProbTriError, ValueError):
    pass


class SingularNormalEquations(ProbTriError, RuntimeError):
    pass


class ZeroMassVolume(ProbTriError, ValueError):
    pass


class FlatHeatmap(ProbTriError, ValueError):
    pass


class InitFailed(ProbTriError, RuntimeError):
    pass


class AllZeroWeights(ProbTriError, RuntimeError):
    pass


class DimensionMismatch(ProbTriError, ValueError):
    pass


class ConfigError(ProbTriError, ValueError):
    pass
