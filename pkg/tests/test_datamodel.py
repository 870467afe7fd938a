"""Unit tests for the `datamodel` module."""

import json

import numpy as np
import pytest

from focuskit.datamodel import (
    MANIFEST_NAME,
    Cohort,
    VolumeBag,
    load_cohort,
    read_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)
from focuskit.enums import DiseaseLabel, QualityLabel, Split
from focuskit.exceptions import (
    CohortValidationError,
    NonFiniteTensor,
    TensorFormatError,
    TruncatedTensor,
)

G = QualityLabel.GRADABLE
U = QualityLabel.UNGRADABLE


def make_bag(patient_id="P00000", disease=DiseaseLabel.CSC, n=3, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    abnormal = [disease != DiseaseLabel.NORMAL] + [False] * (n - 1)
    return VolumeBag(
        patient_id=patient_id,
        center_id="C0",
        slices=rng.standard_normal((n, dim)).astype(np.float32),
        slice_quality=[G] * (n - 1) + [U],
        slice_abnormal=abnormal,
        patient_disease=disease,
        split=Split.TRAIN,
    )


class TestTensorFiles:
    def test_header_and_payload(self, tmp_path):
        path = tmp_path / "x.f32"
        write_tensor(path, [2, 2], [1.0, 2.0, 3.0, 4.0])
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert json.loads(header) == dict(dtype="f32", shape=[2, 2])
        assert len(payload) == 16

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "x.f32"
        write_tensor(path, [3], [0.5, -1.25, 2.0])
        shape, values = read_tensor(path)
        assert shape == [3]
        assert values.dtype == np.float32
        assert values.tolist() == [0.5, -1.25, 2.0]

    def test_random_shapes_roundtrip_with_stable_bytes(self, tmp_path):
        rng = np.random.default_rng(11)
        for trial in range(20):
            shape = rng.integers(1, 6, size=int(rng.integers(1, 4))).tolist()
            data = rng.standard_normal(shape).astype(np.float32)
            first, second = tmp_path / f"{trial}a.f32", tmp_path / f"{trial}b.f32"
            write_tensor(first, shape, data)
            write_tensor(second, shape, data)
            assert first.read_bytes() == second.read_bytes()
            read_shape, values = read_tensor(first)
            assert read_shape == shape
            np.testing.assert_array_equal(values, data.ravel())

    def test_wrong_number_of_values(self, tmp_path):
        with pytest.raises(TensorFormatError):
            write_tensor(tmp_path / "x.f32", [2, 3], [0.0] * 5)

    def test_nan_is_rejected_on_write(self, tmp_path):
        with pytest.raises(NonFiniteTensor):
            write_tensor(tmp_path / "x.f32", [2], [0.0, float("nan")])

    def test_float32_overflow_is_rejected(self, tmp_path):
        with pytest.raises(NonFiniteTensor):
            write_tensor(tmp_path / "x.f32", [1], [1e300])

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.f32"
        path.write_bytes(b'{"dtype":"f32","shape":[4]}\n' + bytes(12))
        with pytest.raises(TruncatedTensor) as exc_info:
            read_tensor(path)
        assert exc_info.value.expected_bytes == 16
        assert exc_info.value.actual_bytes == 12

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.f32"
        path.write_bytes(b'{"dtype":"f32","shape":[1]}\n' + bytes(8))
        with pytest.raises(TensorFormatError):
            read_tensor(path)

    def test_nan_payload(self, tmp_path):
        path = tmp_path / "x.f32"
        payload = np.array([1.0, np.nan], dtype="<f4").tobytes()
        path.write_bytes(b'{"dtype":"f32","shape":[2]}\n' + payload)
        with pytest.raises(NonFiniteTensor):
            read_tensor(path)

    @pytest.mark.parametrize(
        "header",
        [
            b"not json",
            b'{"dtype":"f64","shape":[1]}',
            b'{"dtype":"f32","shape":[-1]}',
            b'{"dtype":"f32","shape":[1],"extra":0}',
        ],
    )
    def test_malformed_header(self, tmp_path, header):
        path = tmp_path / "x.f32"
        path.write_bytes(header + b"\n" + bytes(4))
        with pytest.raises(TensorFormatError):
            read_tensor(path)

    def test_missing_header_line(self, tmp_path):
        path = tmp_path / "x.f32"
        path.write_bytes(b'{"dtype":"f32","shape":[0]}')
        with pytest.raises(TensorFormatError):
            read_tensor(path)


class TestVolumeBag:
    def test_slices_are_read_only(self):
        bag = make_bag()
        with pytest.raises(ValueError):
            bag.slices[0, 0] = 1.0

    def test_derived_properties(self):
        bag = make_bag(n=4)
        assert bag.n_slices == 4
        assert bag.feature_dim == 8
        assert bag.gradable_mask.tolist() == [True, True, True, False]
        assert bag.lesion_slices == [0]
        assert bag.is_abnormal

    def test_normal_patient_with_abnormal_slice(self):
        with pytest.raises(CohortValidationError) as exc_info:
            VolumeBag(
                patient_id="P00007",
                center_id="C0",
                slices=np.zeros((2, 8)),
                slice_quality=[G, G],
                slice_abnormal=[True, False],
                patient_disease=DiseaseLabel.NORMAL,
            )
        assert exc_info.value.patient_id == "P00007"

    def test_diseased_patient_without_abnormal_slice(self):
        with pytest.raises(CohortValidationError):
            VolumeBag(
                patient_id="P00001",
                center_id="C0",
                slices=np.zeros((2, 8)),
                slice_quality=[G, G],
                slice_abnormal=[False, False],
                patient_disease=DiseaseLabel.AMD,
            )

    def test_label_count_mismatch(self):
        with pytest.raises(CohortValidationError):
            VolumeBag(
                patient_id="P00001",
                center_id="C0",
                slices=np.zeros((3, 8)),
                slice_quality=[G, G],
                slice_abnormal=[False, False, False],
                patient_disease=DiseaseLabel.NORMAL,
            )

    def test_empty_bag(self):
        with pytest.raises(CohortValidationError):
            VolumeBag(
                patient_id="P00001",
                center_id="C0",
                slices=np.zeros((0, 8)),
                slice_quality=[],
                slice_abnormal=[],
                patient_disease=DiseaseLabel.NORMAL,
            )


class TestCohort:
    def test_duplicate_patient_ids(self):
        with pytest.raises(CohortValidationError):
            Cohort(feature_dim=8, bags=[make_bag(), make_bag(seed=1)])

    def test_feature_dim_mismatch(self):
        with pytest.raises(CohortValidationError):
            Cohort(feature_dim=16, bags=[make_bag()])

    def test_by_split_and_patient(self):
        cohort = Cohort(
            feature_dim=8,
            bags=[make_bag("P00000"), make_bag("P00001", DiseaseLabel.NORMAL)],
        )
        assert len(cohort.by_split("train")) == 2
        assert cohort.by_split(Split.TEST) == []
        assert cohort.by_patient()["P00001"].patient_disease == DiseaseLabel.NORMAL
        assert cohort.n_classes == 9


class TestManifest:
    @pytest.fixture(scope="class")
    def manifest_dir(self, tmp_path_factory):
        directory = tmp_path_factory.mktemp("manifest")
        cohort = Cohort(
            feature_dim=8,
            bags=[
                make_bag("P00000", DiseaseLabel.CSC, seed=0),
                make_bag("P00001", DiseaseLabel.NORMAL, seed=1),
            ],
        )
        write_manifest(cohort, directory)
        yield directory

    def test_files_are_written(self, manifest_dir):
        assert (manifest_dir / MANIFEST_NAME).exists()
        assert (manifest_dir / "tensors" / "P00000.f32").exists()

    def test_read_manifest(self, manifest_dir):
        manifest = read_manifest(manifest_dir)
        assert manifest.feature_dim == 8
        assert [e.patient_id for e in manifest.entries] == ["P00000", "P00001"]

    def test_load_cohort(self, manifest_dir):
        cohort = load_cohort(manifest_dir / MANIFEST_NAME)
        assert len(cohort) == 2
        expected = make_bag("P00000", seed=0)
        np.testing.assert_array_equal(cohort.bags[0].slices, expected.slices)
        assert cohort.bags[0].slice_quality == expected.slice_quality

    def test_threads_do_not_change_result(self, manifest_dir):
        single = load_cohort(manifest_dir, threads=1)
        threaded = load_cohort(manifest_dir, threads=2)
        for a, b in zip(single, threaded):
            assert a.patient_id == b.patient_id
            np.testing.assert_array_equal(a.slices, b.slices)

    def _rewrite(self, source, target, edit):
        document = json.loads((source / MANIFEST_NAME).read_text())
        edit(document)
        target.mkdir(exist_ok=True)
        (target / MANIFEST_NAME).write_text(json.dumps(document))
        return target / MANIFEST_NAME

    def test_normal_with_abnormal_slice_names_patient(self, manifest_dir, tmp_path):
        def edit(document):
            document["volumes"][1]["slice_abnormal"][0] = True
            document["volumes"][1]["path"] = str(
                manifest_dir / document["volumes"][1]["path"]
            )
            document["volumes"][0]["path"] = str(
                manifest_dir / document["volumes"][0]["path"]
            )

        path = self._rewrite(manifest_dir, tmp_path / "bad", edit)
        with pytest.raises(CohortValidationError) as exc_info:
            load_cohort(path)
        assert exc_info.value.patient_id == "P00001"

    def test_duplicate_ids(self, manifest_dir, tmp_path):
        def edit(document):
            document["volumes"][1]["patient_id"] = "P00000"

        path = self._rewrite(manifest_dir, tmp_path / "dup", edit)
        with pytest.raises(CohortValidationError):
            read_manifest(path)

    def test_missing_tensor(self, manifest_dir, tmp_path):
        path = self._rewrite(manifest_dir, tmp_path / "missing", lambda d: None)
        with pytest.raises(CohortValidationError) as exc_info:
            load_cohort(path)
        assert exc_info.value.patient_id == "P00000"

    def test_unknown_label(self, manifest_dir, tmp_path):
        def edit(document):
            document["volumes"][0]["patient_disease"] = "Glaucoma"

        path = self._rewrite(manifest_dir, tmp_path / "label", edit)
        with pytest.raises(CohortValidationError):
            read_manifest(path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("{")
        with pytest.raises(CohortValidationError):
            read_manifest(tmp_path)
