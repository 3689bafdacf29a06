"""Exception types raised across the package."""


class SatmakerError(Exception):
    pass


class FormatError(SatmakerError):
    """Malformed container header or checkpoint manifest."""


class TruncationError(SatmakerError):
    """Payload holds fewer (or more) samples than the header declares."""


class GeometryError(SatmakerError, ValueError):
    """Shapes or origins do not line up."""


class SizeError(SatmakerError, ValueError):
    pass


class ConfigError(SatmakerError, ValueError):
    pass


class ContractError(SatmakerError, ValueError):
    pass


class MissingReferenceError(SatmakerError, ValueError):
    """No usable reference pixels (e.g. a fully masked input)."""


class DivergenceError(SatmakerError, FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite {component} loss: {value!r}")
        self.component = component


class IntegrityError(SatmakerError):
    """Train/test manifests share scenes or tiles."""
