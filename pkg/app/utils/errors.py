# app/utils/errors.py

from typing import Any, Dict, List, Optional


class GaitVLMError(Exception):
    """Base class for every error raised by the app package."""

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable record written by the CLI and the API on failure."""
        record: Dict[str, Any] = {"error": type(self).__name__, "message": str(self)}
        for key, value in self.__dict__.items():
            if not key.startswith("_"):
                record[key] = value
        return record


# --- diffmath ---
class DiffMathError(GaitVLMError):
    pass


class ShapeMismatchError(DiffMathError):
    def __init__(self, node: str, shapes: List[tuple], detail: str = ""):
        self.node = node
        self.shapes = [list(s) for s in shapes]
        super().__init__(f"Shape mismatch at node '{node}': {self.shapes} {detail}".strip())


class UnboundInputError(DiffMathError):
    def __init__(self, node: str, missing: List[str]):
        self.node = node
        self.missing = sorted(missing)
        super().__init__(f"Node '{node}' has unbound inputs: {self.missing}")


class BackwardBeforeForwardError(DiffMathError):
    pass


class NonFiniteValueError(DiffMathError):
    pass


class MissingGradientError(DiffMathError):
    def __init__(self, missing: List[str]):
        self.missing = sorted(missing)
        super().__init__(f"No gradient supplied for trainable parameters: {self.missing}")


class CheckpointFormatError(DiffMathError):
    pass


# --- gait parameters ---
class GaitParameterError(GaitVLMError):
    pass


class UnknownParameterError(GaitParameterError):
    def __init__(self, param_id: Any):
        self.param_id = param_id
        super().__init__(f"Unknown gait parameter id: {param_id}")


class ZeroVarianceError(GaitParameterError):
    pass


class SentenceParseError(GaitParameterError):
    def __init__(self, message: str, clause_index: Optional[int] = None):
        self.clause_index = clause_index
        where = f" (clause {clause_index})" if clause_index is not None else ""
        super().__init__(f"{message}{where}")


# --- numeric text ---
class NumTextError(GaitVLMError):
    pass


class OutOfVocabularyError(NumTextError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"Word not in vocabulary: '{word}'")


class NumBasisError(NumTextError):
    pass


class SequenceTooLongError(NumTextError):
    def __init__(self, length: int, max_len: int):
        self.length = length
        self.max_len = max_len
        super().__init__(f"Sequence of length {length} exceeds max_len {max_len}")


class ValueOutOfRangeError(NumTextError):
    pass


# --- models / losses ---
class ModelError(GaitVLMError):
    pass


class LossInputError(GaitVLMError):
    pass


# --- data ---
class DatasetError(GaitVLMError):
    pass


# --- harness ---
class ConfigError(GaitVLMError):
    pass


class FoldFailedError(GaitVLMError):
    def __init__(self, fold: int, cause: str):
        self.fold = fold
        super().__init__(f"Fold {fold} failed: {cause}")


class MissingArtifactsError(GaitVLMError):
    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__(f"Missing artifacts: {self.missing}")
