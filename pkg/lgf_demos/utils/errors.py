"""
Exceptions raised across lgf_demos. Callers in the discovery loop catch the
numerical ones and turn them into sentinel losses or candidate rejections.
"""


class LGFError(Exception):
	"""Root of every error raised by this package."""


class ConfigError(LGFError):
	pass


# ---- Grammar ---- #

class GrammarError(LGFError):
	pass


class ParseError(LGFError):
	pass


class AmbiguityError(ParseError):
	pass


class IncompleteDerivation(LGFError):
	pass


class LengthError(LGFError):
	pass


class DecodeOverflow(LGFError):
	pass


# ---- Expressions ---- #

class NonFinite(LGFError):
	pass


class EmptyOperator(LGFError):
	pass


# ---- Learning ---- #

class ShapeError(LGFError):
	pass


class DataError(LGFError):
	pass


class TimeOverflow(LGFError):
	pass


class PredictorShapeError(LGFError):
	pass


class DegenerateLabels(LGFError):
	pass


# ---- Dynamics and discovery ---- #

class ImplicitUnsolvable(LGFError):
	pass


class SolverDiverged(LGFError):
	pass


class ExhaustedPopulation(LGFError):
	pass


class FitError(LGFError):
	pass


class ZeroReference(LGFError):
	pass
