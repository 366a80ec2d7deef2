"""Exception types shared across the package."""


class OCLError(Exception):
    """Base class for all package errors."""


class ContractError(OCLError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericFault(OCLError, ArithmeticError):
    """A forward value became NaN or infinite."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"{op}: non-finite value" + (f" ({detail})" if detail else ""))


class ConfigError(OCLError, ValueError):
    """Invalid configuration value or document."""
