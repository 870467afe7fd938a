"""Global fixtures for unit tests."""

import copy

import pytest

from focuskit.config import MetricConfig, RunConfig
from focuskit.datamodel import load_cohort
from focuskit.pipeline import load_models
from focuskit.stage_configs import get_all_stage_configs
from focuskit.synthgen import gen_cohort
from focuskit.workflow import Workflow


SMALL_CONFIG = dict(
    synth=dict(n_patients=70, slices_per_volume=16),
    train=dict(
        quality=dict(epochs=4, batch_size=8),
        abnormal=dict(epochs=4, batch_size=8),
        disease=dict(epochs=4, batch_size=8),
    ),
    encoder=dict(hidden_widths=[16, 8], quality_hidden_widths=[16, 8]),
    aggregator=dict(hidden_dim=8),
    eval=dict(bootstrap_resamples=50),
    seed=7,
)


@pytest.fixture(scope="session")
def small_config_dict():
    yield copy.deepcopy(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_config(small_config_dict):
    yield RunConfig.from_dict(small_config_dict, environ=dict())


@pytest.fixture(scope="session")
def metric_config():
    yield MetricConfig(
        name="metric-name",
        pretty_name="Metric name",
        results_key="macro_f1",
        postprocessing_fn=lambda x: f"{x:.2f}",
    )


@pytest.fixture(
    scope="session",
    params=get_all_stage_configs().values(),
    ids=lambda cfg: cfg.name,
)
def stage_config(request):
    yield request.param


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory, small_config):
    directory = tmp_path_factory.mktemp("cohort")
    Workflow(config=copy.deepcopy(small_config)).generate(directory)
    yield directory


@pytest.fixture(scope="session")
def cohort(cohort_dir):
    yield load_cohort(cohort_dir)


@pytest.fixture(scope="session")
def models_dir(tmp_path_factory, small_config, cohort_dir):
    directory = tmp_path_factory.mktemp("models")
    Workflow(config=copy.deepcopy(small_config)).train(cohort_dir, output_dir=directory)
    yield directory


@pytest.fixture(scope="session")
def models(models_dir):
    yield load_models(models_dir)


@pytest.fixture(scope="session")
def pure_config(small_config_dict):
    config = copy.deepcopy(small_config_dict)
    config["synth"].update(
        lesion_fraction=1.0,
        ungradable_slice_rate=0.0,
        centers=[dict(center_id="C0")],
    )
    yield RunConfig.from_dict(config, environ=dict())


@pytest.fixture(scope="session")
def pure_cohort(pure_config):
    yield gen_cohort(pure_config.synth)
