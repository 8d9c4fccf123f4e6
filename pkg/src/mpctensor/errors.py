"""Exception hierarchy shared by every layer of the package."""


class MpcError(Exception):
    """Base class for all errors raised by mpctensor."""


class OverflowBound(MpcError, ValueError):
    pass


class ShapeMismatch(MpcError, ValueError):
    pass


class BackendMismatch(MpcError, TypeError):
    pass


class ScaleMismatch(MpcError, ValueError):
    pass


class MissingTriple(MpcError, LookupError):
    """Offline material for a node was never produced or never delivered."""


class ModeUnsupported(MpcError, ValueError):
    pass


class UnresolvedShape(MpcError, ValueError):
    pass


class PlanError(MpcError, ValueError):
    """Structurally invalid computation plan (e.g. masking a tensor twice)."""


class ProtocolDesync(MpcError, RuntimeError):
    pass


class ChannelClosed(MpcError, ConnectionError):
    pass


class ConnectFailed(MpcError, ConnectionError):
    pass


class ChannelTimeout(MpcError, TimeoutError):
    pass


class DegreeTooLow(MpcError, ValueError):
    pass


class MissingWeights(MpcError, KeyError):
    pass


class NegativeVariance(MpcError, ValueError):
    pass


class BadMagic(MpcError, ValueError):
    pass


class TruncatedFile(MpcError, ValueError):
    pass


class ConfigError(MpcError, ValueError):
    pass
