"""Exception types shared by all modules; the CLI maps them to exit codes."""

EXIT_OK = 0
EXIT_CHECK_FAILED = 2
EXIT_CONFIG = 3
EXIT_STAGE = 4
EXIT_NOTHING_TO_EMIT = 5


class CIError(Exception):
    exit_code = EXIT_STAGE


class ConfigError(CIError, ValueError):
    exit_code = EXIT_CONFIG


class StageError(CIError, RuntimeError):
    exit_code = EXIT_STAGE

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ContractError(CIError, ValueError):
    """A precondition of an operation was violated."""


class CFLError(ContractError):
    pass


class AdmissibilityError(ContractError):
    pass
