import numpy as np
import pytest
from hypothesis import settings
from threadpoolctl import threadpool_limits

from rlcm.config import ExperimentConfig, RLConfig
from rlcm.consistency import ConsistencyModel
from rlcm.diffusion import ScoreModel
from rlcm.experiments import cmd_finetune, cmd_pretrain

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# single-threaded BLAS: the reproducible mode, and steadier timings
_LIMITS = threadpool_limits(limits=1)

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def small_cm(seed=0, dim=2, n_contexts=4, hidden=(16, 16)):
    return ConsistencyModel.create(dim, n_contexts, np.random.default_rng(seed), hidden=hidden)


def small_sm(seed=0, dim=2, n_contexts=4, hidden=(16, 16), H_diff=50):
    return ScoreModel.create(dim, n_contexts, np.random.default_rng(seed), hidden=hidden, H_diff=H_diff)


@pytest.fixture
def cm():
    return small_cm()


@pytest.fixture
def sm():
    return small_sm()


# full-size runs shared across modules (computed at most once per session)

@pytest.fixture(scope="session")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def target_rlcm(runs_dir):
    """Pretrained consistency model on the mixture, fine-tuned for 125 epochs (20k queries) per seed."""
    cfg = ExperimentConfig(task="target2d", arm="rlcm", out_dir=str(runs_dir), train=RLConfig(epochs=125))
    cmd_pretrain(cfg)
    return cfg, cmd_finetune(cfg)


@pytest.fixture(scope="session")
def target_ddpo(runs_dir):
    """Pretrained diffusion model on the mixture, fine-tuned for 125 epochs (20k queries) per seed."""
    cfg = ExperimentConfig(task="target2d", arm="ddpo", out_dir=str(runs_dir), train=RLConfig(epochs=125))
    cmd_pretrain(cfg)
    return cfg, cmd_finetune(cfg)
