"""Generation of labelled synthetic cohorts in feature space.

Normal slices are drawn from a zero-mean unit-variance Gaussian. A diseased volume
carries `max(1, round(rho * n))` lesion slices, shifted by `delta` along a fixed unit
direction of its disease class. Ungradable slices are replaced by high-variance noise,
and finally every slice goes through the affine shift of its imaging center.
"""

import logging
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from .config import N_DISEASE_CLASSES, CenterShift, CohortSpec
from .datamodel import Cohort, VolumeBag, write_manifest
from .enums import DiseaseLabel, QualityLabel, Split
from .exceptions import DimensionMismatch, InvalidCohortSpec
from .utils import derive_random_state, derive_seed

logger = logging.getLogger(__name__)


UNGRADABLE_NOISE_SIGMA = 3.0

# Index used to derive the seed of the lesion directions, disjoint from patient indices
BASIS_SEED_INDEX = 1 << 40

SPLIT_SEED_INDEX = (1 << 40) + 1


def lesion_directions(feature_dim: int, seed: int) -> np.ndarray:
    """The unit lesion directions of the 8 diseases.

    Args:
        feature_dim:
            The feature dimension D, at least 8.
        seed:
            The cohort seed.

    Returns:
        An array of shape (8, D) whose rows are the first rows of a seeded random
        orthonormal basis.
    """
    n_diseases = N_DISEASE_CLASSES - 1
    if feature_dim < n_diseases:
        raise InvalidCohortSpec(
            f"The feature dimension must be at least {n_diseases}, got {feature_dim}."
        )
    rng = np.random.default_rng(derive_seed(seed, BASIS_SEED_INDEX))
    basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    return basis.T[:n_diseases].copy()


def apply_center_shift(
    x: np.ndarray, shift: CenterShift, noise_draw: np.ndarray
) -> np.ndarray:
    """Apply the domain shift of a center to slice features.

    Args:
        x:
            Features of shape (D,) or (n, D).
        shift:
            The center shift.
        noise_draw:
            Standard normal draws with the same shape as `x`.

    Returns:
        `feature_scale * x + feature_offset + noise_sigma * noise_draw`.

    Raises:
        DimensionMismatch:
            If the shapes of `x`, the offset and the noise do not agree.
    """
    x = np.asarray(x, dtype=np.float64)
    noise_draw = np.asarray(noise_draw, dtype=np.float64)
    offset = shift.offset_vector
    if offset.ndim == 0:
        offset = np.full(x.shape[-1], float(offset))
    if offset.shape[-1] != x.shape[-1]:
        raise DimensionMismatch(
            expected=x.shape[-1], actual=offset.shape[-1], what="center offset"
        )
    if noise_draw.shape != x.shape:
        raise DimensionMismatch(
            expected=x.shape, actual=noise_draw.shape, what="noise draw"
        )
    return shift.feature_scale * x + offset + shift.noise_sigma * noise_draw


def generate_bags(spec: CohortSpec) -> list[VolumeBag]:
    """Generate the volumes of a cohort, without split assignment.

    Every patient draws from its own generator, seeded by mixing the cohort seed with
    the patient index, so patients are independent of each other.

    Args:
        spec:
            The cohort specification.

    Returns:
        The volumes, ordered by patient index. Features are rounded to float32 so that
        they equal what is written to disk.
    """
    seed = spec.seed or 0
    assert spec.centers is not None
    directions = lesion_directions(spec.feature_dim, seed)
    prevalence = np.asarray(spec.class_prevalence, dtype=float)
    prevalence = prevalence / prevalence.sum()
    n = spec.slices_per_volume
    n_lesions = spec.n_lesion_slices

    bags: list[VolumeBag] = list()
    for patient_idx in range(spec.n_patients):
        rng = np.random.default_rng(derive_seed(seed, patient_idx))
        center = spec.centers[patient_idx % len(spec.centers)]

        disease_idx = int(rng.choice(N_DISEASE_CLASSES, p=prevalence))
        features = rng.standard_normal((n, spec.feature_dim))

        abnormal = np.zeros(n, dtype=bool)
        if disease_idx != 0:
            positions = rng.choice(n, size=n_lesions, replace=False)
            abnormal[positions] = True
            features[abnormal] += spec.lesion_margin * directions[disease_idx - 1]

        ungradable = rng.random(n) < spec.ungradable_slice_rate
        noise = UNGRADABLE_NOISE_SIGMA * rng.standard_normal((n, spec.feature_dim))
        features[ungradable] = noise[ungradable]

        features = apply_center_shift(
            features, center, rng.standard_normal((n, spec.feature_dim))
        )

        bags.append(
            VolumeBag(
                patient_id=f"P{patient_idx:05d}",
                center_id=center.center_id,
                slices=features.astype(np.float32).astype(np.float64),
                slice_quality=tuple(
                    QualityLabel.UNGRADABLE if u else QualityLabel.GRADABLE
                    for u in ungradable
                ),
                slice_abnormal=tuple(bool(a) for a in abnormal),
                patient_disease=DiseaseLabel.from_index(disease_idx),
            )
        )
    return bags


def _split_off(
    indices: np.ndarray, labels: np.ndarray, n_first: int, random_state: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split off `n_first` of the indices, stratified by label where possible.

    Args:
        indices:
            The indices to split.
        labels:
            The class index of every index.
        n_first:
            The number of indices in the first part.
        random_state:
            Seed of the split.

    Returns:
        The first and second part of the indices.
    """
    if n_first == 0:
        return indices[:0], indices
    if n_first == len(indices):
        return indices, indices[:0]
    try:
        first, second = train_test_split(
            indices, train_size=n_first, stratify=labels, random_state=random_state
        )
    except ValueError as e:
        logger.warning(
            f"Could not stratify a split of {len(indices)} patients by disease "
            f"({e}). Falling back to an unstratified split."
        )
        first, second = train_test_split(
            indices, train_size=n_first, random_state=random_state
        )
    return np.sort(first), np.sort(second)


def split_cohort(
    bags: Cohort | list[VolumeBag], train_frac: float, val_frac: float, seed: int
) -> dict[str, Split]:
    """Assign patients to train, validation and test splits, stratified by disease.

    The split sizes are `floor(N * train_frac)` and `floor(N * val_frac)`, with the
    remainder going to the test split. The training split is cut off first and the
    validation split is then cut off the rest, both stratified by disease. If a class
    is too small to be stratified, that cut falls back to an unstratified one.

    Args:
        bags:
            The patients to split.
        train_frac:
            Fraction of patients in the training split.
        val_frac:
            Fraction of patients in the validation split.
        seed:
            Seed of the assignment.

    Returns:
        Mapping from patient ID to split.

    Raises:
        InvalidCohortSpec:
            If the fractions are negative or sum to 1 or more.
    """
    if not (train_frac >= 0 and val_frac >= 0 and train_frac + val_frac < 1):
        raise InvalidCohortSpec(
            "The train and validation fractions must be non-negative and sum to less "
            "than 1."
        )
    bags = list(bags)
    n_total = len(bags)
    n_train = int(np.floor(n_total * train_frac + 1e-9))
    n_val = int(np.floor(n_total * val_frac + 1e-9))

    labels = np.array([bag.patient_disease.index for bag in bags], dtype=np.int64)
    indices = np.arange(n_total)
    train_idxs, rest_idxs = _split_off(
        indices,
        labels=labels,
        n_first=n_train,
        random_state=derive_random_state(seed, SPLIT_SEED_INDEX),
    )
    val_idxs, test_idxs = _split_off(
        rest_idxs,
        labels=labels[rest_idxs],
        n_first=n_val,
        random_state=derive_random_state(seed, SPLIT_SEED_INDEX + 1),
    )

    assignment: dict[str, Split] = dict()
    for split, idxs in [
        (Split.TRAIN, train_idxs),
        (Split.VAL, val_idxs),
        (Split.TEST, test_idxs),
    ]:
        for idx in idxs:
            assignment[bags[idx].patient_id] = split
    return assignment


def gen_cohort(spec: CohortSpec, output_dir: str | Path | None = None) -> Cohort:
    """Generate a labelled synthetic cohort, optionally writing it to disk.

    Patients of external centers are all assigned to the test split; the remaining
    patients are split with `split_cohort`.

    Args:
        spec:
            The cohort specification.
        output_dir:
            If given, the directory where the manifest and tensor files are written.

    Returns:
        The generated cohort.
    """
    seed = spec.seed or 0
    bags = generate_bags(spec)

    external = set(spec.external_centers)
    internal_bags = [bag for bag in bags if bag.center_id not in external]
    assignment = split_cohort(
        internal_bags, train_frac=spec.train_frac, val_frac=spec.val_frac, seed=seed
    )
    for bag in bags:
        assignment.setdefault(bag.patient_id, Split.TEST)

    cohort = Cohort(
        feature_dim=spec.feature_dim,
        bags=tuple(
            VolumeBag(
                patient_id=bag.patient_id,
                center_id=bag.center_id,
                slices=bag.slices,
                slice_quality=bag.slice_quality,
                slice_abnormal=bag.slice_abnormal,
                patient_disease=bag.patient_disease,
                split=assignment[bag.patient_id],
            )
            for bag in bags
        ),
    )

    n_abnormal = sum(bag.is_abnormal for bag in cohort)
    logger.info(
        f"Generated {len(cohort)} patients ({n_abnormal} abnormal) over "
        f"{len(spec.centers or [])} centers."
    )

    if output_dir is not None:
        write_manifest(cohort, output_dir)
    return cohort
