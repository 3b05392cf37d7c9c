import sys

import pytest
import torch
from hypothesis import settings

from visa.dlfm import DLFMConfig
from visa.encoder import EncoderConfig
from visa.etgm import ETGMConfig
from visa.harness.config import RunConfig
from visa.synthetic import FactorSpec, generate_dataset

settings.register_profile("visa", deadline=None, max_examples=60)
settings.load_profile("visa")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(dim=16, depth=2, heads=2, patch_size=8, img_size=(16, 8))


@pytest.fixture
def tiny_run_cfg():
    """A fast config on a small synthetic set (8 ids, 4 train)."""
    cfg = RunConfig(
        encoder=EncoderConfig(dim=16, depth=1, heads=2, patch_size=8, img_size=(32, 16)),
        etgm=ETGMConfig(num_experts=3, top_k=2, tokens_per_expert=2, heads=2),
        dlfm=DLFMConfig(neighbors=3, heads=2),
        seed=0,
    )
    cfg.data.synthetic = FactorSpec(num_identities=8, samples_per_id_per_view=4, image_size=(32, 16))
    cfg.data.ids_per_batch = 4
    cfg.data.instances_per_id = 4
    cfg.optim.epochs = 2
    cfg.optim.warmup_epochs = 0
    return cfg


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(FactorSpec(num_identities=8, samples_per_id_per_view=4, image_size=(32, 16)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
