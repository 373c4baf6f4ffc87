"""
Pytest configuration file for prompt_decoupler tests.
"""
import numpy as np
import pytest

from prompt_decoupler.encoder.model import DualEncoder, EncoderConfig, PromptSet
from prompt_decoupler.scenedata.generator import DatasetSpec, generate


TINY_CONFIG_TEXT = """
[run]
output_dir = {output_dir}
seeds = 1, 2

[encoder]
image_size = 16
patch_size = 8
image_width = 16
text_width = 16
embed_dim = 8
depth = 2
heads = 2
mlp_ratio = 2
prompt_length = 2
prompt_depth = 2

[data]
num_classes = 4
train_per_class = 4
test_per_class = 3
image_size = 16

[pretrain]
corpus_size = 24
batch_size = 4
epochs = 1

[train]
epochs = 2
batch_size = 4
mask_source = oracle

[protocol]
shots = 2
bg_classes = 5
"""


def tiny_encoder_config(**overrides) -> EncoderConfig:
    """Encoder small enough for exhaustive gradient checks."""
    values = dict(
        image_size=16,
        patch_size=8,
        image_width=16,
        text_width=16,
        embed_dim=8,
        depth=2,
        heads=2,
        mlp_ratio=2,
        vocab_size=64,
        context_length=8,
        prompt_length=2,
        prompt_depth=2,
    )
    values.update(overrides)
    return EncoderConfig(**values)


@pytest.fixture(scope="session")
def encoder_config():
    """Tiny encoder configuration."""
    return tiny_encoder_config()


@pytest.fixture(scope="session")
def frozen_encoder(encoder_config):
    """Randomly initialized, frozen tiny backbone."""
    return DualEncoder.initialize(encoder_config, seed=0).freeze()


@pytest.fixture
def prompts(encoder_config):
    """Trainable prompts with a visible initialization."""
    return PromptSet.initialize(encoder_config, seed=3, std=0.5)


@pytest.fixture(scope="session")
def data_spec():
    """Four-class dataset spec at 16 px."""
    return DatasetSpec(num_classes=4, train_per_class=4, test_per_class=3, image_size=16)


@pytest.fixture(scope="session")
def dataset(data_spec):
    """Generated tiny dataset."""
    return generate(data_spec, seed=0)


@pytest.fixture(scope="session")
def multi_dataset():
    """Generated tiny multi-object dataset."""
    spec = DatasetSpec(num_classes=4, train_per_class=4, test_per_class=3, image_size=16, multi_object=True, max_objects=2)
    return generate(spec, seed=0)


@pytest.fixture
def config_file(tmp_path):
    """Tiny INI run configuration writing into tmp_path/runs."""
    path = tmp_path / "run.ini"
    path.write_text(TINY_CONFIG_TEXT.format(output_dir=tmp_path / "runs"), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)
