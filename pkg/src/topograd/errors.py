"""Exception hierarchy shared by all modules."""


class TopogradError(Exception):
    pass


class ArgumentError(TopogradError, ValueError):
    pass


class GeometryError(TopogradError, ValueError):
    pass


class LookupError_(TopogradError, LookupError):
    """Point lookup failed (point outside the mesh hull)."""


class PatchError(TopogradError):
    """Too few vertices for a gradient-recovery fit."""


class LocalityError(PatchError):
    """Recovery patch straddles an interface."""


class MaterialError(TopogradError, ValueError):
    pass


class SolverError(TopogradError, RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class ConfigError(TopogradError, ValueError):
    pass


class TdPointError(TopogradError):
    """Evaluation point violates the clearance required by the formula."""
