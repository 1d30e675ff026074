import pytest
import torch

from storysync.core.config import ModelConfig

torch.set_num_threads(1)


TINY = dict(image_size=16, unet_channels=(16, 32, 32), attention_levels=(1, 2), text_dim=32, num_heads=4,
            ref_size=16, patch_size=8, id_dim=32, image_feat_dim=32, resampler_tokens=4, num_frames=4,
            sample_steps=4)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Small enough for a forward and backward pass in well under a second."""
    return ModelConfig(**TINY)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
