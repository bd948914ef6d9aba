class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values or divergence (CLI exit code 3)."""

    def __init__(self, message: str, phase: str = "", step: int | None = None):
        self.phase = phase
        self.step = step
        where = phase if step is None else f"{phase} step {step}"
        super().__init__(f"[{where}] {message}" if where else message)


class PhaseError(RuntimeError):
    """Wraps a failure inside one pipeline phase, keeping the phase tag."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} failed: {cause}")
