import time

import pytest
from threadpoolctl import threadpool_limits

from instalign.config import RunConfig
from instalign.synthworld import default_corpus
from instalign import trainer

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def default_config():
    return RunConfig()


@pytest.fixture(scope="session")
def train_corpus(default_config):
    return default_corpus(default_config.seed, default_config.world, "train")


@pytest.fixture(scope="session")
def eval_corpus(default_config):
    return default_corpus(default_config.seed, default_config.world, "eval")


@pytest.fixture(scope="session")
def trained(default_config):
    """Default-config run from scratch, corpus generation included in the timing.

    Returns (initial state, final state, seconds).
    """
    t0 = time.perf_counter()
    scenes = default_corpus(default_config.seed, default_config.world, "train")
    init = trainer.TrainState.initial(default_config)
    final = trainer.train(init.copy(), trainer.prepare_corpus(scenes, default_config), default_config)
    return init, final, time.perf_counter() - t0


@pytest.fixture(scope="session")
def model(trained, default_config):
    return trainer.inference_model(trained[1], default_config)


@pytest.fixture(scope="session")
def checkpoint(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    trainer.save_checkpoint(trained[1], path)
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
