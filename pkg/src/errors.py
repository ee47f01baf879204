"""Exception hierarchy shared by all packages.

Library code raises these; only ``main.py`` turns them into exit codes.
"""
from typing import Optional


class DtdError(Exception):
    exit_code: int = 1


class RejectedInputError(DtdError, ValueError):
    """Input has the wrong shape, is non-finite, or is inconsistent with the model."""
    exit_code = 1


# --- Data / format errors (exit code 2) ---

class DataFormatError(DtdError):
    exit_code = 2


class IdxMagicError(DataFormatError):
    pass


class IdxTruncatedError(DataFormatError):
    pass


class IdxDimensionError(DataFormatError):
    pass


class IdxLabelRangeError(DataFormatError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


class ModelFormatError(DataFormatError):
    pass


class PatternFormatError(DataFormatError):
    pass


class FingerprintMismatchError(DataFormatError):
    pass


class ArtifactMissingError(DataFormatError):
    pass


# --- Numerical failures (exit code 3) ---

class NumericalError(DtdError, ArithmeticError):
    exit_code = 3


class DegenerateDirectionError(NumericalError):
    pass


class DegenerateDenominatorError(NumericalError):
    def __init__(self, rule: str, layer: Optional[int], neuron: int, denominator: float):
        self.rule = rule
        self.layer = layer
        self.neuron = neuron
        self.denominator = denominator
        super().__init__(
            f"Degenerate denominator {denominator:.3e} for rule {rule}, layer {layer}, neuron {neuron}. "
            f"Pass a positive stabilizer to continue."
        )


class TrainingDivergedError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass
