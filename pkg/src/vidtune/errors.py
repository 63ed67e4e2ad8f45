"""Exception hierarchy shared by every vidtune module."""


class VidtuneError(Exception):
    pass


class DimensionError(VidtuneError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(VidtuneError, ValueError):
    """A layer, schedule or run was configured with invalid settings."""


class ContractError(VidtuneError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(VidtuneError, ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class IntegrityError(VidtuneError):
    """Internal bookkeeping (parameter tags, indices) is inconsistent."""


class VocabularyError(VidtuneError, KeyError):
    def __init__(self, tokens):
        self.tokens = list(tokens)
        super().__init__(f"unknown token(s): {', '.join(self.tokens)}")

    def __str__(self):
        return self.args[0]


class SpecificationError(VidtuneError, ValueError):
    """A synthetic scene cannot be rendered as described."""


class CheckpointError(VidtuneError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
