import numpy as np
import pytest

from promptvid import autodiff as ad


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


TINY_UNET = dict(base_channels=8, channel_multipliers=(1, 2), frames=2, height=8, width=8, attention_levels=(0, 1),
                 head_dim=4, norm_groups=2, temb_dim=16, temporal_kernel=3)


def tiny_model(seed=0, refiner=None, **unet):
    from promptvid.model import ModelConfig, PromptVideoModel
    from promptvid.unet import UNetConfig

    cfg = ModelConfig(UNetConfig(**{**TINY_UNET, **unet}), refiner_widths=refiner, init_seed=seed)
    return PromptVideoModel(cfg)


def tiny_bundles(model, n=2, seed=0):
    g = np.random.default_rng(seed)
    H = model.config.unet.height
    captions = ["a happy dog runs on the grass", "the cat jumps", "a young panda walks slowly"]
    return [model.make_bundle(captions[i % 3], g.uniform(-1, 1, (H, H, 3))) for i in range(n)]


@pytest.fixture
def model():
    return tiny_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
