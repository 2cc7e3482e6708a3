"""Shared fixtures: a tiny synthetic scenario and small model/train configs.

Everything here is sized for speed — a handful of users, short sequences,
small embeddings — so the unit suite stays in seconds. The acceptance tests
build their own full-size runs.
"""
import pytest

from fedseqrec.data import ScenarioConfig, synthesize_scenario
from fedseqrec.disentangle import LossWeights
from fedseqrec.federation import ModelConfig, TrainConfig


TINY_SCENARIO = ScenarioConfig(
    num_domains=2,
    users=24,
    shared_factors=4,
    exclusive_factors=4,
    vocab_per_domain=40,
    seq_len_range=(12, 16),
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY_SCENARIO


@pytest.fixture(scope="session")
def tiny_scenario():
    """Two small domains plus the latent factors that generated them."""
    datasets, factors = synthesize_scenario(TINY_SCENARIO)
    return datasets, factors


@pytest.fixture(scope="session")
def tiny_datasets(tiny_scenario):
    return tiny_scenario[0]


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(embed_dim=8, max_len=16, num_gnn_layers=1, num_attn_layers=1, num_heads=2)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(
        rounds=2,
        local_epochs=1,
        patience=2,
        batch_size=16,
        lr=1e-3,
        dropout=0.0,
        weights=LossWeights(),
        eval_k=10,
        negatives_per_eval=20,
        seed=11,
    )
