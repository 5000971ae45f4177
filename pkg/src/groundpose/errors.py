"""Exception hierarchy shared by all groundpose modules."""


class PoseError(Exception):
    """Base class for estimation failures."""


class NonPositiveDepth(PoseError):
    """A point lies at or behind the camera center."""


class DegenerateRay(PoseError):
    """A ray has no usable component on the ground plane."""


class DegenerateGeometry(PoseError):
    """Input geometry is singular for the requested computation."""


class NoValidSolution(PoseError):
    """A solver produced no admissible pose."""


class SingularNormalEquations(PoseError):
    """Weighted normal equations cannot be solved (all weights zero or rank deficient)."""


class InsufficientInliers(PoseError):
    """Too few inliers remain to constrain the parameters."""


class EmptyInput(PoseError, ValueError):
    pass


class ZeroEstimate(PoseError, ValueError):
    pass
