from typing import Any, List, Optional

# Process exit codes returned by the CLI
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_COMPUTATION_ERROR = 3


class CocregException(Exception):
    """
    Base error carrying a human-readable detail and the CLI exit code
    """
    exit_code = EXIT_COMPUTATION_ERROR

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class InputValidationError(CocregException):
    exit_code = EXIT_INPUT_ERROR


class InsufficientDataError(InputValidationError):
    pass


class NotPositiveDefiniteError(CocregException):
    pass


class NonPositiveFormError(CocregException):
    pass


class DegeneratePredictorError(CocregException):
    pass


class CollinearCovariatesError(CocregException):
    pass


class FitFailureError(CocregException):
    def __init__(self, detail: str, diagnostics: Optional[List[Any]] = None):
        super().__init__(detail)
        self.diagnostics = diagnostics or []


class ReplicateFailureError(CocregException):
    def __init__(self, detail: str, n_failed: int = 0, n_total: int = 0):
        super().__init__(detail)
        self.n_failed = n_failed
        self.n_total = n_total
