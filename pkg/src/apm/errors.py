"""Exception types shared across the package."""


class ApmError(Exception):
    """Base class; the CLI maps these to single-line diagnostics."""


class DimensionError(ApmError, ValueError):
    pass


class DegenerateInputError(ApmError, ValueError):
    pass


class FoldError(ApmError, ValueError):
    pass


class OptimizerError(ApmError, RuntimeError):
    pass


class TrainingDivergedError(ApmError, RuntimeError):
    pass


class FormatError(ApmError, ValueError):
    """Base for on-disk format violations."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class BundleError(FormatError):
    pass


class IncompatibleCheckpointError(FormatError):
    pass
