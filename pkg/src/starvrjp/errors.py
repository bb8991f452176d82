"""Exception types raised across the package.

Every validation error names the first violating item in its message.
"""


class StarVrjpError(ValueError):
    """Base class for all package errors."""


# graph construction
class InvolutionBroken(StarVrjpError):
    pass


class EdgeClosureBroken(StarVrjpError):
    pass


class WeightAsymmetry(StarVrjpError):
    pass


class NotStronglyConnected(StarVrjpError):
    pass


class NonpositiveWeight(StarVrjpError):
    pass


class SelfLoopEdge(StarVrjpError):
    pass


class SizeLimit(StarVrjpError):
    pass


# linear algebra
class NotPositiveStable(StarVrjpError):
    pass


class NotSelfDual(StarVrjpError):
    pass


class SingularGenerator(StarVrjpError):
    pass


# manifold
class MaxIterations(StarVrjpError):
    pass


class NotOnManifold(StarVrjpError):
    pass


class NotInDomain(StarVrjpError):
    pass


# measures / quadrature
class RootedNeedsEta(StarVrjpError):
    pass


class DimensionTooLarge(StarVrjpError):
    pass


class NonConvergence(StarVrjpError):
    pass


class QuadratureFailure(StarVrjpError):
    pass


class UnknownIdentity(StarVrjpError):
    pass


class InstanceTooLarge(StarVrjpError):
    pass


# simulation / statistics
class InvalidPath(StarVrjpError):
    pass


class HorizonTooLarge(StarVrjpError):
    pass


class MixingFailure(StarVrjpError):
    pass


class NotConverged(StarVrjpError):
    pass


class DepthTooLarge(StarVrjpError):
    pass


class ConfigError(StarVrjpError):
    pass
