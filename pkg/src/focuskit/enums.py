"""Enums used in the project."""

import enum


class QualityLabel(enum.Enum):
    """Gradability of a single slice.

    Attributes:
        GRADABLE:
            The slice is interpretable.
        UNGRADABLE:
            The slice is uninterpretable and should not be diagnosed.
    """

    GRADABLE = "gradable"
    UNGRADABLE = "ungradable"


class DiseaseLabel(enum.Enum):
    """The patient-level diagnosis, with index 0 being the normal class.

    Attributes:
        NORMAL:
            No pathology.
        AMD:
            Age-related macular degeneration.
        CNV:
            Choroidal neovascularization.
        CSC:
            Central serous chorioretinopathy.
        DR:
            Diabetic retinopathy.
        MH:
            Macular hole.
        ME:
            Macular edema.
        ERM:
            Epiretinal membrane.
        RP:
            Retinitis pigmentosa.
    """

    NORMAL = "Normal"
    AMD = "AMD"
    CNV = "CNV"
    CSC = "CSC"
    DR = "DR"
    MH = "MH"
    ME = "ME"
    ERM = "ERM"
    RP = "RP"

    @property
    def index(self) -> int:
        return list(DiseaseLabel).index(self)

    @classmethod
    def from_index(cls, index: int) -> "DiseaseLabel":
        return list(cls)[index]


class Split(enum.Enum):
    """The data split a patient belongs to.

    Attributes:
        TRAIN:
            Training split.
        VAL:
            Validation split.
        TEST:
            Test split.
    """

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Activation(enum.Enum):
    """Hidden-layer nonlinearity of an MLP.

    Attributes:
        RELU:
            Rectified linear unit.
        TANH:
            Hyperbolic tangent.
    """

    RELU = "relu"
    TANH = "tanh"


class OutputActivation(enum.Enum):
    """Activation applied to the final layer of an MLP.

    Attributes:
        NONE:
            No activation, the output is the affine map.
        SOFTMAX:
            Softmax over the output vector.
        SIGMOID:
            Elementwise logistic sigmoid.
    """

    NONE = "none"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class AggregatorKind(enum.Enum):
    """The pooling operator used to fuse slices into a patient embedding.

    Attributes:
        MEAN:
            Uniform average of the slice features.
        MAX:
            Elementwise maximum of the slice features.
        ATTENTION:
            Tanh attention pooling.
        GATED_ATTENTION:
            Gated (tanh times sigmoid) attention pooling.
        CLASS_QUERY:
            Learned per-class query vectors attending over slices.
        UAAC:
            Attention pooling calibrated by slice prediction certainty.
    """

    MEAN = "mean"
    MAX = "max"
    ATTENTION = "attention"
    GATED_ATTENTION = "gated_attention"
    CLASS_QUERY = "class_query"
    UAAC = "uaac"


class StageTask(enum.Enum):
    """The task solved by a stage of the pipeline.

    Attributes:
        QUALITY:
            Slice-level gradability.
        ABNORMALITY:
            Normal versus abnormal.
        DISEASE:
            Multi-disease classification, including the normal class.
    """

    QUALITY = "quality"
    ABNORMALITY = "abnormality"
    DISEASE = "disease"


class PipelineStatus(enum.Enum):
    """The final status of a pipeline run.

    Attributes:
        UNGRADABLE:
            The volume was rejected by the quality gate.
        NORMAL:
            The volume passed the quality gate and was triaged as normal.
        DISEASED:
            The volume was diagnosed with a disease.
    """

    UNGRADABLE = "Ungradable"
    NORMAL = "Normal"
    DISEASED = "Diseased"


class GroupBy(enum.Enum):
    """How evaluation results are grouped.

    Attributes:
        ALL:
            A single summary over all patients.
        CENTER:
            One sub-summary per imaging center, in addition to the overall one.
    """

    ALL = "all"
    CENTER = "center"
