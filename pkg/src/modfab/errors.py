"""Exception types shared across the package."""


class ModfabError(Exception):
    """Base class for domain errors (bad data, bad config)."""


class DimensionError(ModfabError, ValueError):
    pass


class ContractError(ModfabError, ValueError):
    pass


class NumericError(ModfabError, ArithmeticError):
    pass


class MissingModuleError(ModfabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing stage module"


class EncodingError(ModfabError, ValueError):
    pass


class SchemaError(ModfabError, ValueError):
    pass


class RowError(ModfabError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SplitError(ModfabError, ValueError):
    pass


class ConfigError(ModfabError, ValueError):
    pass
