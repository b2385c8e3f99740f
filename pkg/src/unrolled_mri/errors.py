"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/contract problems exit
with 2, numeric failures (divergence, failed inversions) with 3.
"""


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with an operation."""


class UnsupportedSizeError(ShapeError):
    """An extent violates a structural requirement (e.g. non-power-of-two FFT)."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(RuntimeError):
    """An API was used outside its contract (non-scalar backward root, impure
    checkpoint function, reuse of a spent tape)."""


class NumericError(RuntimeError):
    """A numeric procedure failed (divergence, non-convergent inversion)."""


class InversionError(NumericError):
    """Fixed-point inversion of a residual block did not converge."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""
