"""Exception types shared across the package."""

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Argument lies outside the domain of the function."""


class DegenerateInputError(ValueError):
    """Input is well-formed but carries no usable information (n < 2, zero variance, ...)."""


class DefinitenessError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot, value):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} = {value!r}")


class ContractError(RuntimeError):
    """A caller violated an interface contract (mismatched config, bad registry entry, ...)."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""
