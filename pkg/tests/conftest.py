import pytest
import torch

from openintent.config import SyntheticConfig
from openintent.data import LabeledDataset
from openintent.data_structures import LabeledInstance
from openintent.synthetic import generate_synthetic
from tests import FIXTURES_DIR


@pytest.fixture
def tiny_dataset_dir():
    return FIXTURES_DIR / 'tiny_intents'


@pytest.fixture
def toy_dataset():
    # three balanced classes of four instances, one token per instance
    instances = [LabeledInstance(token_ids=[2 + i], label_id=i // 4, source_index=i) for i in range(12)]
    return LabeledDataset(instances, num_classes=3)


@pytest.fixture
def unit_embeddings():
    generator = torch.Generator().manual_seed(0)
    embeddings = torch.randn(12, 8, generator=generator, dtype=torch.float64)
    return torch.nn.functional.normalize(embeddings, dim=-1)


@pytest.fixture
def synthetic_dir(tmp_path):
    config = SyntheticConfig(
        num_classes=4,
        open_fraction=0.25,
        train_per_class=12,
        valid_per_class=3,
        test_per_class=5,
        vocab_size=60,
        latent_dim=6,
        seed=3,
    )
    return generate_synthetic(config, tmp_path / 'synthetic')
