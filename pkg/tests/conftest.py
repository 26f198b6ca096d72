import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from glaucoma_tribranch.backbone import BackboneConfig
from glaucoma_tribranch.dwm import DwmConfig
from glaucoma_tribranch.model import ModelConfig

torch.set_num_threads(1)

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


def tiny_backbone(**kw):
    base = dict(
        variant="tiny",
        stage_channels=(4, 8, 8, 16),
        stage_blocks=(1, 1, 1, 1),
        embed_dim=8,
        attention="ke_cbam",
        attention_stages=(2, 3, 4),
        reduction=4,
        prior_dim=12,
    )
    base.update(kw)
    return BackboneConfig(**base)


def tiny_model_config(**kw):
    backbone = kw.pop("backbone", None) or tiny_backbone()
    base = dict(backbone=backbone, dwm=DwmConfig(), input_size=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
