import numpy as np
import pytest

from cirdg.data import Batch
from cirdg.model import ModelConfig, init_parameters

TINY = ModelConfig(video_dim=5, text_dim=3, hidden_dim=6, embed_dim=8, qk_dim=4, num_classes=4, seed=0)


def random_batch(rng, b, cfg=TINY, n_scen=3, n_loc=3):
    return Batch(
        ids=np.arange(b),
        video=rng.standard_normal((b, cfg.video_dim)),
        text=rng.standard_normal((b, cfg.text_dim)),
        labels=rng.integers(0, cfg.num_classes, b),
        scenario=rng.integers(0, n_scen, b),
        location=rng.integers(0, n_loc, b),
    )


@pytest.fixture
def tiny_model():
    return init_parameters(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
