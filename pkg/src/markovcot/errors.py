"""Exception taxonomy shared by the library and the CLI exit codes."""


class MarkovCotError(Exception):
    exit_code = 1


class ConfigError(MarkovCotError, ValueError):
    exit_code = 2


class ContractError(MarkovCotError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 1


class LengthError(ContractError):
    """A token sequence does not fit the model's context window."""


class NumericError(MarkovCotError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer
