"""Exception hierarchy. CLI exit codes hang off the three top-level groups."""


class EmvfmError(Exception):
    exit_code = 1


class ConfigError(EmvfmError):
    exit_code = 2


class DataError(EmvfmError):
    exit_code = 3


class NumericalAbort(EmvfmError):
    exit_code = 4


class LayoutError(DataError):
    pass


class IntegrityError(DataError):
    pass


class SplitError(DataError):
    pass


class ShapeError(ValueError):
    pass


class RegistryError(ConfigError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InjectionError(ConfigError):
    pass


class FingerprintMismatch(ConfigError):
    pass
