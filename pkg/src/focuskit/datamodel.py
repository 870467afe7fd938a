"""Shared domain types, the on-disk cohort format and validated ingestion.

Tensor files start with a UTF-8 JSON header line, `{"dtype":"f32","shape":[...]}`,
terminated by a newline, followed by the values as 32-bit little-endian IEEE-754
floats in row-major order. A cohort is described by a `manifest.json` that references
one tensor file of shape [n, D] per volume.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .enums import DiseaseLabel, QualityLabel, Split
from .exceptions import (
    CohortValidationError,
    NonFiniteTensor,
    TensorFormatError,
    TruncatedTensor,
)

logger = logging.getLogger(__name__)


MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
TENSOR_DIR = "tensors"
TENSOR_SUFFIX = ".f32"


def write_tensor(
    path: str | Path, shape: Sequence[int], data: Sequence[float] | np.ndarray
) -> None:
    """Write a tensor file.

    Args:
        path:
            Destination path. Its parent directory must exist.
        shape:
            The shape of the tensor.
        data:
            The values in row-major order. Arrays are flattened in C order.

    Raises:
        TensorFormatError:
            If the number of values does not match the shape.
        NonFiniteTensor:
            If a value is NaN or infinite, or overflows a 32-bit float.
        OSError:
            If the path is not writable.
    """
    shape = [int(dim) for dim in shape]
    if any(dim < 0 for dim in shape):
        raise TensorFormatError(f"Negative dimension in shape {shape}.")

    values = np.asarray(data, dtype=np.float64).ravel()
    if values.size != math.prod(shape):
        raise TensorFormatError(
            f"The shape {shape} requires {math.prod(shape)} values, but "
            f"{values.size} were given."
        )
    if not np.all(np.isfinite(values)):
        raise NonFiniteTensor()

    with np.errstate(over="ignore"):
        payload = values.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteTensor("The tensor contains values outside the float32 range.")

    header = json.dumps(dict(dtype="f32", shape=shape), separators=(",", ":")) + "\n"
    with Path(path).open("wb") as f:
        f.write(header.encode("utf-8"))
        f.write(payload.tobytes())


def read_tensor(path: str | Path) -> tuple[list[int], np.ndarray]:
    """Read a tensor file.

    Args:
        path:
            Path to the tensor file.

    Returns:
        A pair (shape, values), with the values as a flat float32 array.

    Raises:
        TensorFormatError:
            If the header is malformed or there are trailing bytes.
        TruncatedTensor:
            If the payload is shorter than the header requires.
        NonFiniteTensor:
            If the payload contains NaN or infinite values.
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise TensorFormatError(f"The tensor file {path} has no header line.")

    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise TensorFormatError(f"The tensor file {path} has a malformed header.")

    if not isinstance(header, dict) or set(header) != {"dtype", "shape"}:
        raise TensorFormatError(
            f"The tensor header of {path} must have exactly the keys 'dtype' and "
            "'shape'."
        )
    if header["dtype"] != "f32":
        raise TensorFormatError(f"Unsupported dtype {header['dtype']!r} in {path}.")
    shape = header["shape"]
    if not isinstance(shape, list) or not all(
        isinstance(dim, int) and not isinstance(dim, bool) and dim >= 0
        for dim in shape
    ):
        raise TensorFormatError(f"Invalid shape {shape!r} in {path}.")

    payload = raw[newline + 1 :]
    expected_bytes = 4 * math.prod(shape)
    if len(payload) < expected_bytes:
        raise TruncatedTensor(
            path=path, expected_bytes=expected_bytes, actual_bytes=len(payload)
        )
    if len(payload) > expected_bytes:
        raise TensorFormatError(
            f"The tensor file {path} has {len(payload) - expected_bytes} trailing "
            "bytes."
        )

    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise NonFiniteTensor(f"The tensor file {path} contains non-finite values.")
    return shape, values


@dataclass(frozen=True)
class VolumeBag:
    """The slices of one patient volume together with their labels.

    Attributes:
        patient_id:
            The patient identifier.
        center_id:
            The imaging center the volume comes from.
        slices:
            The slice features, an array of shape (n, D). Stored read-only.
        slice_quality:
            The gradability of each slice.
        slice_abnormal:
            Whether each slice shows pathology.
        patient_disease:
            The patient-level diagnosis.
        split:
            The data split of the patient, if assigned.
    """

    patient_id: str
    center_id: str
    slices: np.ndarray
    slice_quality: tuple[QualityLabel, ...]
    slice_abnormal: tuple[bool, ...]
    patient_disease: DiseaseLabel
    split: Split | None = None

    def __post_init__(self):
        slices = np.array(self.slices, dtype=np.float64)
        if slices.ndim != 2 or slices.shape[0] < 1 or slices.shape[1] < 1:
            raise CohortValidationError(
                self.patient_id,
                f"slices must have shape (n, D) with n, D >= 1, got {slices.shape}",
            )
        if not np.all(np.isfinite(slices)):
            raise CohortValidationError(self.patient_id, "non-finite slice features")
        slices.flags.writeable = False
        object.__setattr__(self, "slices", slices)
        object.__setattr__(
            self, "slice_quality", tuple(QualityLabel(q) for q in self.slice_quality)
        )
        object.__setattr__(
            self, "slice_abnormal", tuple(bool(a) for a in self.slice_abnormal)
        )
        object.__setattr__(self, "patient_disease", DiseaseLabel(self.patient_disease))
        if self.split is not None:
            object.__setattr__(self, "split", Split(self.split))

        n = slices.shape[0]
        if len(self.slice_quality) != n or len(self.slice_abnormal) != n:
            raise CohortValidationError(
                self.patient_id,
                f"{n} slices but {len(self.slice_quality)} quality labels and "
                f"{len(self.slice_abnormal)} abnormality labels",
            )
        if self.patient_disease == DiseaseLabel.NORMAL and any(self.slice_abnormal):
            raise CohortValidationError(
                self.patient_id, "a Normal patient has a slice labelled abnormal"
            )
        if self.patient_disease != DiseaseLabel.NORMAL and not any(
            self.slice_abnormal
        ):
            raise CohortValidationError(
                self.patient_id,
                f"a {self.patient_disease.value} patient has no slice labelled "
                "abnormal",
            )

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.slices.shape[1]

    @property
    def gradable_mask(self) -> np.ndarray:
        return np.array([q == QualityLabel.GRADABLE for q in self.slice_quality])

    @property
    def lesion_slices(self) -> list[int]:
        return [idx for idx, abnormal in enumerate(self.slice_abnormal) if abnormal]

    @property
    def is_abnormal(self) -> bool:
        return self.patient_disease != DiseaseLabel.NORMAL


@dataclass(frozen=True)
class Cohort:
    """An ordered collection of volumes sharing a feature dimension.

    Attributes:
        feature_dim:
            The feature dimension D.
        bags:
            The volumes, in manifest order.
        class_names:
            The names of the disease labels, in index order.
    """

    feature_dim: int
    bags: tuple[VolumeBag, ...]
    class_names: tuple[str, ...] = field(
        default_factory=lambda: tuple(label.value for label in DiseaseLabel)
    )

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        seen: set[str] = set()
        for bag in self.bags:
            if bag.patient_id in seen:
                raise CohortValidationError(bag.patient_id, "duplicate patient ID")
            seen.add(bag.patient_id)
            if bag.feature_dim != self.feature_dim:
                raise CohortValidationError(
                    bag.patient_id,
                    f"feature dimension {bag.feature_dim} differs from the cohort's "
                    f"{self.feature_dim}",
                )

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[VolumeBag]:
        return iter(self.bags)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def by_split(self, split: Split | str) -> list[VolumeBag]:
        """The bags of a split, in cohort order."""
        split = Split(split)
        return [bag for bag in self.bags if bag.split == split]

    def by_patient(self) -> dict[str, VolumeBag]:
        """Mapping from patient ID to bag."""
        return {bag.patient_id: bag for bag in self.bags}


@dataclass(frozen=True)
class ManifestEntry:
    """A volume record of a cohort manifest, before its tensor is loaded.

    Attributes:
        patient_id:
            The patient identifier.
        center_id:
            The imaging center.
        path:
            Path of the tensor file, relative to the manifest directory.
        split:
            The data split, if assigned.
        patient_disease:
            The patient-level diagnosis.
        slice_quality:
            The gradability of each slice.
        slice_abnormal:
            Whether each slice shows pathology.
    """

    patient_id: str
    center_id: str
    path: str
    split: Split | None
    patient_disease: DiseaseLabel
    slice_quality: tuple[QualityLabel, ...]
    slice_abnormal: tuple[bool, ...]


@dataclass(frozen=True)
class CohortManifest:
    """A parsed cohort manifest.

    Attributes:
        feature_dim:
            The feature dimension D declared by the manifest.
        entries:
            The volume records, in manifest order.
        root:
            The directory containing the manifest; tensor paths are relative to it.
        class_names:
            The names of the disease labels.
    """

    feature_dim: int
    entries: tuple[ManifestEntry, ...]
    root: Path
    class_names: tuple[str, ...]

    def entry_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


def read_manifest(manifest_path: str | Path) -> CohortManifest:
    """Parse and validate a manifest without loading any tensor.

    Args:
        manifest_path:
            Path to the manifest JSON file, or to the directory containing it.

    Returns:
        The parsed manifest.

    Raises:
        CohortValidationError:
            If the manifest is malformed, has duplicate patient IDs or unknown labels.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME

    with manifest_path.open(encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise CohortValidationError("<manifest>", f"invalid JSON: {e}")

    if not isinstance(document, dict):
        raise CohortValidationError("<manifest>", "expected a JSON object")
    feature_dim = document.get("feature_dim")
    if not isinstance(feature_dim, int) or feature_dim < 1:
        raise CohortValidationError(
            "<manifest>", f"invalid feature_dim {feature_dim!r}"
        )
    class_names = tuple(
        document.get("classes", [label.value for label in DiseaseLabel])
    )
    volumes = document.get("volumes")
    if not isinstance(volumes, list):
        raise CohortValidationError("<manifest>", "'volumes' must be a list")

    entries: list[ManifestEntry] = list()
    seen: set[str] = set()
    for record in volumes:
        entry = _parse_entry(record)
        if entry.patient_id in seen:
            raise CohortValidationError(entry.patient_id, "duplicate patient ID")
        seen.add(entry.patient_id)
        entries.append(entry)

    return CohortManifest(
        feature_dim=feature_dim,
        entries=tuple(entries),
        root=manifest_path.parent,
        class_names=class_names,
    )


def _parse_entry(record: Any) -> ManifestEntry:
    """Parse a single volume record of a manifest."""
    if not isinstance(record, dict):
        raise CohortValidationError("<manifest>", "volume records must be objects")
    patient_id = record.get("patient_id")
    if not isinstance(patient_id, str) or patient_id == "":
        raise CohortValidationError("<manifest>", "a volume has no patient_id")

    try:
        split = Split(record["split"]) if record.get("split") is not None else None
        return ManifestEntry(
            patient_id=patient_id,
            center_id=str(record["center_id"]),
            path=str(record["path"]),
            split=split,
            patient_disease=DiseaseLabel(record["patient_disease"]),
            slice_quality=tuple(QualityLabel(q) for q in record["slice_quality"]),
            slice_abnormal=tuple(bool(a) for a in record["slice_abnormal"]),
        )
    except KeyError as e:
        raise CohortValidationError(patient_id, f"missing field {e}")
    except (ValueError, TypeError) as e:
        raise CohortValidationError(patient_id, str(e))


def load_volume(manifest: CohortManifest, entry: ManifestEntry) -> VolumeBag:
    """Load and validate the volume of a single manifest entry.

    Args:
        manifest:
            The manifest the entry belongs to.
        entry:
            The entry to load.

    Returns:
        The validated volume.

    Raises:
        CohortValidationError:
            If the tensor file is missing, has the wrong shape or the labels are
            inconsistent.
        TensorFormatError, TruncatedTensor, NonFiniteTensor:
            If the tensor file is corrupt.
    """
    path = manifest.entry_path(entry)
    if not path.exists():
        raise CohortValidationError(entry.patient_id, f"tensor file {path} is missing")

    shape, values = read_tensor(path)
    if len(shape) != 2 or shape[1] != manifest.feature_dim:
        raise CohortValidationError(
            entry.patient_id,
            f"tensor {path} has shape {shape}, expected [n, {manifest.feature_dim}]",
        )
    return VolumeBag(
        patient_id=entry.patient_id,
        center_id=entry.center_id,
        slices=values.reshape(shape).astype(np.float64),
        slice_quality=entry.slice_quality,
        slice_abnormal=entry.slice_abnormal,
        patient_disease=entry.patient_disease,
        split=entry.split,
    )


def load_cohort(manifest_path: str | Path, threads: int = 1) -> Cohort:
    """Load a cohort, validating every volume.

    Args:
        manifest_path:
            Path to the manifest JSON file, or the directory containing it.
        threads:
            Number of threads used to read the tensor files. The result is
            independent of this number.

    Returns:
        The cohort, in manifest order.

    Raises:
        CohortValidationError:
            If any volume is invalid. The error names the offending patient.
    """
    manifest = read_manifest(manifest_path)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            bags = list(
                executor.map(lambda e: load_volume(manifest, e), manifest.entries)
            )
    else:
        bags = [load_volume(manifest, entry) for entry in manifest.entries]

    logger.debug(f"Loaded {len(bags)} volumes from {manifest.root}.")
    return Cohort(
        feature_dim=manifest.feature_dim,
        bags=tuple(bags),
        class_names=manifest.class_names,
    )


def write_manifest(cohort: Cohort, directory: str | Path) -> Path:
    """Write a cohort to disk as a manifest and one tensor file per volume.

    Args:
        cohort:
            The cohort to write.
        directory:
            The output directory. Created if missing.

    Returns:
        The path of the manifest.
    """
    directory = Path(directory)
    (directory / TENSOR_DIR).mkdir(parents=True, exist_ok=True)

    volumes = list()
    for bag in cohort.bags:
        relative_path = f"{TENSOR_DIR}/{bag.patient_id}{TENSOR_SUFFIX}"
        write_tensor(directory / relative_path, bag.slices.shape, bag.slices)
        volumes.append(
            dict(
                patient_id=bag.patient_id,
                center_id=bag.center_id,
                path=relative_path,
                split=bag.split.value if bag.split is not None else None,
                patient_disease=bag.patient_disease.value,
                slice_quality=[q.value for q in bag.slice_quality],
                slice_abnormal=list(bag.slice_abnormal),
            )
        )

    document = dict(
        schema_version=MANIFEST_SCHEMA_VERSION,
        feature_dim=cohort.feature_dim,
        classes=list(cohort.class_names),
        volumes=volumes,
    )
    manifest_path = directory / MANIFEST_NAME
    with manifest_path.open("w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")
    return manifest_path
