"""Scikit-learn-style front end over the federated trainer.

The estimator takes a list of :class:`~fedseqrec.data.DomainDataset` as its
``X``; fitting runs the federated protocol and leaves the trained clients on
the instance. Hyperparameters follow scikit-learn conventions (stored
verbatim in ``__init__``, fitted state in trailing-underscore attributes),
so ``get_params`` / ``set_params`` / ``clone`` work for grid searches.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .disentangle import LossWeights
from .evaluation import EvalResult, evaluate_clients
from .federation import ModelConfig, TrainConfig, run_variant
from .utils import pad_batch
from .validation import check_domain_datasets, check_option, check_sequences

_FUSIONS = ("both", "shared", "exclusive")
_SPLITS = ("valid", "test")


class FederatedSequenceRecommender(BaseEstimator):
    """Cross-domain sequential recommender trained by federated rounds.

    Parameters mirror :class:`ModelConfig`, :class:`TrainConfig` and the
    objective weights; ``variant`` selects the training recipe (see
    :func:`fedseqrec.federation.resolve_variant`).

    Examples
    --------
    >>> from fedseqrec import ScenarioConfig, generate_synthetic
    >>> est = FederatedSequenceRecommender(rounds=2, local_epochs=1)
    >>> est.fit(generate_synthetic(ScenarioConfig(users=40, vocab_per_domain=60)))
    ... # doctest: +SKIP
    """

    def __init__(
        self,
        embed_dim: int = 32,
        max_len: int = 16,
        num_gnn_layers: int = 2,
        num_attn_layers: int = 2,
        num_heads: int = 2,
        rounds: int = 35,
        local_epochs: int = 3,
        patience: int = 15,
        batch_size: int = 64,
        lr: float = 3e-3,
        dropout: float = 0.0,
        alpha: float = 1.0,
        beta: float = 2.0,
        gamma: float = 1.0,
        contrast_weight: float = 2.0,
        temperature: float = 0.2,
        variant: str = "full",
        eval_k: int = 10,
        eval_negatives: int = 99,
        restore_best: bool = True,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.max_len = max_len
        self.num_gnn_layers = num_gnn_layers
        self.num_attn_layers = num_attn_layers
        self.num_heads = num_heads
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.lr = lr
        self.dropout = dropout
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.contrast_weight = contrast_weight
        self.temperature = temperature
        self.variant = variant
        self.eval_k = eval_k
        self.eval_negatives = eval_negatives
        self.restore_best = restore_best
        self.seed = seed

    # -- config assembly -----------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            max_len=self.max_len,
            num_gnn_layers=self.num_gnn_layers,
            num_attn_layers=self.num_attn_layers,
            num_heads=self.num_heads,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            lr=self.lr,
            dropout=self.dropout,
            weights=LossWeights(
                alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                lambda_=self.contrast_weight, tau=self.temperature,
            ),
            eval_k=self.eval_k,
            negatives_per_eval=self.eval_negatives,
            seed=self.seed,
            restore_best=self.restore_best,
        )

    def _check_fitted(self):
        if not hasattr(self, "clients_"):
            raise NotFittedError("this FederatedSequenceRecommender is not fitted yet")

    def _client(self, domain: str):
        self._check_fitted()
        for client in self.clients_:
            if client.client_id == domain:
                return client
        raise KeyError(f"unknown domain {domain!r}; have {sorted(self.domain_names_)}")

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y=None):
        """Train on a list of domain datasets (one federated client each)."""
        datasets = check_domain_datasets(X)
        cfg = self._train_config()
        cfg.validate()
        model_cfg = self._model_config()
        clients, state, history = run_variant(datasets, model_cfg, cfg, self.variant)
        self.clients_ = clients
        self.global_state_ = state
        self.history_ = history
        self.domain_names_ = [c.client_id for c in clients]
        self.n_rounds_run_ = len(history)
        return self

    def evaluate(self, split: str = "test", fusion: str = "both") -> EvalResult:
        """Ranking metrics per domain plus the cross-domain average."""
        self._check_fitted()
        check_option("split", split, _SPLITS)
        check_option("fusion", fusion, _FUSIONS)
        return evaluate_clients(
            self.clients_, split, fusion=fusion,
            k=self.eval_k, negatives=self.eval_negatives, seed=self.seed,
        )

    def score(self, X=None, y=None) -> float:
        """Cross-domain average test MRR (higher is better)."""
        return self.evaluate("test", "both").average["mrr"]

    def predict_scores(self, domain: str, sequences, fusion: str = "both") -> np.ndarray:
        """Vocabulary logits for the next item after each given sequence."""
        check_option("fusion", fusion, _FUSIONS)
        client = self._client(domain)
        seqs = check_sequences(sequences, client.dataset.vocab_size)
        items = torch.from_numpy(pad_batch(seqs, client.max_len))
        return np.asarray(client.score_contexts(items, fusion))

    def predict(self, domain: str, sequences, k: int = 10) -> np.ndarray:
        """Top-``k`` next-item recommendations (never the pad index)."""
        scores = self.predict_scores(domain, sequences)
        scores[:, 0] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k]
