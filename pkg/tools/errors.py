"""Exception types raised across ivope."""


class IvopeError(Exception):
    """Base class. `details` is merged into the CLI's JSON error payload."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def __reduce__(self):
        # subclasses take different constructor arguments; rebuild from state
        return (_restore, (type(self), self.args), self.__dict__)

    def to_dict(self) -> dict:
        payload = {"error": type(self).__name__, "message": str(self)}
        for key, value in self.details.items():
            if isinstance(value, (str, int, float, bool, list, dict)) or value is None:
                payload[key] = value
        return payload


def _restore(cls, args):
    err = Exception.__new__(cls)
    err.args = args
    return err


class ConfigError(IvopeError, ValueError):
    pass


class MdpError(IvopeError, ValueError):
    pass


class DatasetFormatError(IvopeError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}", line=line)
        self.line = line


class SolverError(IvopeError, RuntimeError):
    pass


class DivergenceError(SolverError):
    pass


class TrainingAborted(IvopeError, RuntimeError):
    def __init__(self, method: str, step: int, reason: str, diagnostics=None, checkpoints=None):
        super().__init__(
            f"{method} aborted at step {step}: {reason}",
            method=method,
            step=step,
            diagnostics=diagnostics or {},
        )
        self.method = method
        self.step = step
        self.diagnostics = diagnostics or {}
        self.checkpoints = checkpoints


class SearchError(IvopeError, RuntimeError):
    pass
