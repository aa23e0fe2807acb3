"""Exception hierarchy shared by all fashionsap modules."""


class FashionSAPError(Exception):
    """Base class for all library errors."""


class InvalidInputError(FashionSAPError):
    """An argument violates an operation's precondition."""


class InvalidConfigError(FashionSAPError):
    """A configuration value or file is invalid."""


class InvalidStateError(FashionSAPError):
    """An object is in a state that forbids the requested operation."""


class FormatError(FashionSAPError):
    """A binary or text container is malformed or truncated."""


class SchemaError(FashionSAPError):
    """A corpus record is missing required fields or violates the schema."""


class CorpusParseError(FashionSAPError):
    """A corpus line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TrainingDivergenceError(FashionSAPError):
    """A loss became non-finite; carries the name of the first bad part."""

    def __init__(self, part: str, value: float):
        super().__init__(f"loss part '{part}' is non-finite ({value!r})")
        self.part = part


class UsageError(FashionSAPError):
    """Bad command line; maps to exit code 1."""
