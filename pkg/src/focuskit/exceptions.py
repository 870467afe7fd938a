"""Custom exceptions used in the project."""

from pathlib import Path


class TensorFormatError(Exception):
    def __init__(self, message: str = "The tensor file is malformed."):
        self.message = message
        super().__init__(self.message)


class TruncatedTensor(Exception):
    def __init__(self, path: str | Path, expected_bytes: int, actual_bytes: int):
        self.path = str(path)
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        self.message = (
            f"The tensor file {self.path} is truncated: the header requires "
            f"{expected_bytes} payload bytes, but only {actual_bytes} were found."
        )
        super().__init__(self.message)


class NonFiniteTensor(Exception):
    def __init__(self, message: str = "The tensor contains NaN or infinite values."):
        self.message = message
        super().__init__(self.message)


class CohortValidationError(Exception):
    def __init__(self, patient_id: str, reason: str):
        self.patient_id = patient_id
        self.reason = reason
        self.message = f"Invalid volume for patient {patient_id!r}: {reason}"
        super().__init__(self.message)


class InvalidCohortSpec(Exception):
    def __init__(self, message: str = "The cohort specification is invalid."):
        self.message = message
        super().__init__(self.message)


class InvalidConfig(Exception):
    def __init__(self, section: str, reason: str):
        self.section = section
        self.reason = reason
        self.message = f"Invalid configuration in section {section!r}: {reason}"
        super().__init__(self.message)


class DimensionMismatch(Exception):
    def __init__(self, expected: int | tuple, actual: int | tuple, what: str = "input"):
        self.expected = expected
        self.actual = actual
        self.what = what
        self.message = (
            f"Dimension mismatch for {what}: expected {expected}, got {actual}."
        )
        super().__init__(self.message)


class EmptyBag(Exception):
    def __init__(self, message: str = "Cannot pool an empty bag of slices."):
        self.message = message
        super().__init__(self.message)


class InvalidPosteriors(Exception):
    def __init__(self, message: str = "The slice posteriors are not row-stochastic."):
        self.message = message
        super().__init__(self.message)


class BackwardBeforeForward(Exception):
    def __init__(self, module: str):
        self.module = module
        self.message = (
            f"Backward was called on {module} before a forward pass was cached."
        )
        super().__init__(self.message)


class TrainingDiverged(Exception):
    def __init__(
        self,
        epoch: int | None = None,
        batch: int | None = None,
        parameter: str | None = None,
        message: str = "",
    ):
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter
        if message != "":
            self.message = message
        elif parameter is not None:
            self.message = f"Non-finite gradient in parameter {parameter!r}."
        else:
            self.message = (
                f"Training diverged with a non-finite loss at epoch {epoch}, "
                f"batch {batch}."
            )
        super().__init__(self.message)


class DegenerateData(Exception):
    def __init__(self, stage: str, label: str):
        self.stage = stage
        self.label = label
        self.message = (
            f"Cannot train the {stage} stage: all training labels are {label!r}, "
            "so there is only a single class to learn."
        )
        super().__init__(self.message)


class CheckpointMismatch(Exception):
    def __init__(self, path: str | Path, reason: str):
        self.path = str(path)
        self.reason = reason
        self.message = f"Checkpoint {self.path} cannot be used: {reason}"
        super().__init__(self.message)


class UndefinedAUC(Exception):
    def __init__(
        self,
        message: str = "The AUC is undefined when only a single class is present.",
    ):
        self.message = message
        super().__init__(self.message)


class UnmatchedPatient(Exception):
    def __init__(self, patient_id: str):
        self.patient_id = patient_id
        self.message = (
            f"The report for patient {patient_id!r} has no matching truth record."
        )
        super().__init__(self.message)


class InvalidEvaluation(Exception):
    def __init__(self, message: str = "The evaluation cannot be computed."):
        self.message = message
        super().__init__(self.message)
