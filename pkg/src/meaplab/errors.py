"""Error taxonomy shared across the package.

Every failure raised on purpose derives from MeapError so the CLI can map
library failures to exit code 1 and argument problems to exit code 2.
"""


class MeapError(Exception):
    """Base class for all meaplab failures."""


class ShapeError(MeapError):
    """Tensor dimensions do not line up for the requested operation."""


class NumericError(MeapError):
    """Non-finite values where finite ones are required."""


class ContractError(MeapError):
    """An operation was called outside its stated contract."""


class EmptyLossError(ContractError):
    """Cross-entropy was asked to average over zero positions."""


class ConfigError(MeapError):
    """Invalid or inconsistent configuration values."""


class InputError(MeapError):
    """Invalid runtime input, e.g. an out-of-range token id."""


class LengthError(MeapError):
    """A sequence or file is shorter/longer than the format allows."""


class FormatError(MeapError):
    """A binary file does not carry the expected magic or version."""


class ContaminationError(MeapError):
    """Mask tokens found where only raw tokens are allowed."""


class GenerationError(MeapError):
    """A synthetic-task generator was given unsatisfiable parameters."""


class StatsError(MeapError):
    """Degenerate input to a statistical routine."""


class TrainingAbort(MeapError):
    """Training stopped early; the last good checkpoint is retained."""


class UsageError(MeapError):
    """Bad command-line flag combination."""
