"""Unit tests for the `enums` module."""

import enum

from focuskit.enums import (
    AggregatorKind,
    DiseaseLabel,
    GroupBy,
    PipelineStatus,
    QualityLabel,
    Split,
    StageTask,
)


class TestDiseaseLabel:
    def test_is_enum(self):
        assert isinstance(DiseaseLabel, enum.EnumMeta)

    def test_label_list(self):
        assert [label.value for label in DiseaseLabel] == [
            "Normal",
            "AMD",
            "CNV",
            "CSC",
            "DR",
            "MH",
            "ME",
            "ERM",
            "RP",
        ]

    def test_normal_is_index_zero(self):
        assert DiseaseLabel.NORMAL.index == 0

    def test_from_index_inverts_index(self):
        for label in DiseaseLabel:
            assert DiseaseLabel.from_index(label.index) == label


class TestQualityLabel:
    def test_quality_list(self):
        assert list(QualityLabel.__members__.keys()) == ["GRADABLE", "UNGRADABLE"]


class TestSplit:
    def test_split_list(self):
        assert [split.value for split in Split] == ["train", "val", "test"]


class TestAggregatorKind:
    def test_kind_list(self):
        assert list(AggregatorKind.__members__.keys()) == [
            "MEAN",
            "MAX",
            "ATTENTION",
            "GATED_ATTENTION",
            "CLASS_QUERY",
            "UAAC",
        ]


class TestStageTask:
    def test_task_list(self):
        assert list(StageTask.__members__.keys()) == [
            "QUALITY",
            "ABNORMALITY",
            "DISEASE",
        ]


class TestPipelineStatus:
    def test_status_values(self):
        assert [status.value for status in PipelineStatus] == [
            "Ungradable",
            "Normal",
            "Diseased",
        ]


class TestGroupBy:
    def test_group_by_values(self):
        assert GroupBy("center") == GroupBy.CENTER
