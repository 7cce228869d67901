"""Exception types shared across the package."""


class DataError(Exception):
    """Invalid input data: schema violations, dangling references, bad values."""


class ParseError(DataError):
    """Malformed file content. Carries position info when available."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class NumericError(Exception):
    """Non-finite or otherwise invalid numeric state during training or inference."""
