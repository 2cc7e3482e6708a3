"""Federated cross-domain sequential recommendation.

Domain clients learn disentangled shared/exclusive sequence representations
with variational graph-augmented encoders; a server aggregates only the
shared branch and per-user latent summaries, never raw interactions.
"""

from .data import (
    DomainDataset,
    ItemGraph,
    ScenarioConfig,
    UserSequence,
    build_item_graph,
    chronological_split,
    generate_synthetic,
    ingest_interaction_log,
    ingest_scenario,
    load_datasets,
    preprocess,
    save_datasets,
)
from .disentangle import (
    Discriminator,
    LossBreakdown,
    LossWeights,
    Predictor,
    disentanglement_loss,
    jsd_similarity,
    kl_to_standard_normal,
    next_item_nll,
    reconstruction_nll,
)
from .contrastive import ContrastiveBatch, augment_shuffle, infonce_loss
from .encoder import LatentBundle, LatentDist, SequenceEncoder, graph_to_torch, sample
from .estimator import FederatedSequenceRecommender
from .evaluation import (
    EvalResult,
    compute_metrics,
    evaluate_client,
    evaluate_clients,
    predict_scores,
    rank_of_target,
    sample_negatives,
)
from .exceptions import ConfigError, ProtocolError, TrainingAbort
from .experiment import ExperimentConfig, load_config, preset, run_experiment, save_config, sweep
from .federation import (
    VARIANTS,
    Client,
    GlobalState,
    ModelConfig,
    MonolithicClient,
    TrainConfig,
    aggregate_params,
    aggregate_representations,
    client_update,
    make_client,
    resolve_variant,
    run_federated,
    run_variant,
)

__version__ = "0.1.0"

__all__ = [
    "Client",
    "ConfigError",
    "ContrastiveBatch",
    "Discriminator",
    "DomainDataset",
    "EvalResult",
    "ExperimentConfig",
    "FederatedSequenceRecommender",
    "GlobalState",
    "ItemGraph",
    "LatentBundle",
    "LatentDist",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "MonolithicClient",
    "Predictor",
    "ProtocolError",
    "ScenarioConfig",
    "SequenceEncoder",
    "TrainConfig",
    "TrainingAbort",
    "UserSequence",
    "VARIANTS",
    "aggregate_params",
    "aggregate_representations",
    "augment_shuffle",
    "build_item_graph",
    "chronological_split",
    "client_update",
    "compute_metrics",
    "disentanglement_loss",
    "evaluate_client",
    "evaluate_clients",
    "generate_synthetic",
    "graph_to_torch",
    "infonce_loss",
    "ingest_interaction_log",
    "ingest_scenario",
    "jsd_similarity",
    "kl_to_standard_normal",
    "load_config",
    "load_datasets",
    "make_client",
    "next_item_nll",
    "predict_scores",
    "preprocess",
    "preset",
    "rank_of_target",
    "reconstruction_nll",
    "resolve_variant",
    "run_experiment",
    "run_federated",
    "run_variant",
    "sample",
    "sample_negatives",
    "save_config",
    "save_datasets",
    "sweep",
]
