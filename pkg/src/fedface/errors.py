"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it and maps
it to a process exit code.
"""


class FedFaceError(Exception):
    category = "error"


class ConfigError(FedFaceError, ValueError):
    category = "config"

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class DegenerateInputError(FedFaceError, ValueError):
    category = "degenerate-input"


class InvalidTargetError(FedFaceError, ValueError):
    category = "invalid-target"


class EmptyClientError(FedFaceError):
    category = "empty-client"


class InitializationError(FedFaceError):
    category = "initialization"


class ProtocolError(FedFaceError):
    category = "protocol"


class InfeasiblePartitionError(FedFaceError, ValueError):
    category = "infeasible-partition"


class EmptyRuleError(FedFaceError, ValueError):
    category = "empty-client-rule"


class EvaluationError(FedFaceError, ValueError):
    category = "evaluation"


class ReportError(FedFaceError):
    category = "report"


class PathError(FedFaceError, FileNotFoundError):
    category = "path"


class OverwriteError(FedFaceError, FileExistsError):
    category = "overwrite"
