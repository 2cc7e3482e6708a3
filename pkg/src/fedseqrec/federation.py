"""Federated training across domain clients.

One client per domain holds two sequence encoders (a domain-shared branch
and a domain-exclusive branch), a next-item predictor, and a bilinear
critic. Each round the server broadcasts the aggregated shared-branch
parameters and the aggregated per-user latent table; clients run local
epochs and upload their new shared parameters, posterior-mean user latents,
and sample count. The server averages both, weighting every client by its
number of training sequences.

Privacy model: raw interaction sequences, item indices and per-item
embeddding *lookups* never leave a client — up-messages carry only model
parameters, per-user latent summaries and scalar statistics. The exclusive
branch, predictor and critic are never transmitted at all.

Gradient routing within a local step follows one backward pass over the
combined objective, with the exclusive user vector detached where it serves
as the critic's negative — so the shared branch is trained by the difference
and similarity terms, the exclusive branch by the difference, exclusive-
reconstruction and contrastive terms, the predictor by both reconstruction
terms, and the critic by the similarity term alone.
"""
from __future__ import annotations

import copy
import dataclasses
import logging

import numpy as np
import torch

from .contrastive import ContrastiveBatch, augment_shuffle, infonce_loss
from .data import DomainDataset, build_item_graph
from .disentangle import (
    Discriminator,
    LossWeights,
    Predictor,
    disentanglement_loss,
    kl_to_standard_normal,
    real_position_mask,
    reconstruction_nll,
)
from .encoder import LatentBundle, SequenceEncoder, graph_to_torch, sample
from .evaluation import evaluate_clients, predict_scores
from .exceptions import ConfigError, ProtocolError, TrainingAbort
from .utils import derive_seed, pad_batch

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ModelConfig:
    """Architecture sizes shared by every client."""

    embed_dim: int = 32
    max_len: int = 16
    num_gnn_layers: int = 2
    num_attn_layers: int = 2
    num_heads: int = 2

    def validate(self) -> None:
        if self.embed_dim < 1 or self.max_len < 1:
            raise ConfigError("embed_dim and max_len must be positive")
        if self.num_gnn_layers < 0:
            raise ConfigError("num_gnn_layers must be >= 0")
        if self.num_attn_layers < 1 or self.num_heads < 1:
            raise ConfigError("attention stack needs >= 1 layer and >= 1 head")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")


@dataclasses.dataclass
class TrainConfig:
    """Protocol and optimization settings for one federated run."""

    rounds: int = 35
    local_epochs: int = 3
    patience: int = 15
    batch_size: int = 64
    lr: float = 3e-3
    dropout: float = 0.0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    eval_k: int = 10
    negatives_per_eval: int = 99
    seed: int = 0
    restore_best: bool = True

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.eval_k < 1 or self.negatives_per_eval < 1:
            raise ConfigError("eval_k and negatives_per_eval must be >= 1")
        self.weights.validate()


# ---------------------------------------------------------------------------
# Round messages
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DownMessage:
    """Server -> client broadcast at the start of a round.

    ``shared_params`` is None when no aggregation happens (purely local
    training); ``rep_table`` is empty before the first aggregation.
    """

    shared_params: dict[str, np.ndarray] | None
    rep_table: dict[str, np.ndarray]
    round: int


@dataclasses.dataclass
class UpMessage:
    """Client -> server payload after local training."""

    client_id: str
    shared_params: dict[str, np.ndarray]
    rep_table: dict[str, np.ndarray]
    sample_count: int
    stats: dict[str, float] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class GlobalState:
    """Server-side state after ``round`` aggregations."""

    shared_params: dict[str, np.ndarray] | None
    rep_table: dict[str, np.ndarray]
    round: int


def _array_payload(arr: np.ndarray) -> dict:
    return {"dtype": str(arr.dtype), "shape": list(arr.shape), "data": arr.ravel().tolist()}


def message_to_payload(msg: UpMessage | DownMessage) -> dict:
    """JSON-safe rendering of a round message (used for transport and audits).

    The payload is exactly what would cross the wire: parameter tensors,
    latent tables, counts. No field ever contains item indices, raw
    sequences, or timestamps.
    """
    if isinstance(msg, UpMessage):
        return {
            "kind": "up",
            "client_id": msg.client_id,
            "sample_count": int(msg.sample_count),
            "stats": {k: float(v) for k, v in msg.stats.items()},
            "shared_params": {k: _array_payload(v) for k, v in msg.shared_params.items()},
            "rep_table": {u: _array_payload(v) for u, v in msg.rep_table.items()},
        }
    return {
        "kind": "down",
        "round": int(msg.round),
        "shared_params": None
        if msg.shared_params is None
        else {k: _array_payload(v) for k, v in msg.shared_params.items()},
        "rep_table": {u: _array_payload(v) for u, v in msg.rep_table.items()},
    }


def _state_to_numpy(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()
    }


def _load_numpy_state(module: torch.nn.Module, params: dict[str, np.ndarray], prefix: str = "") -> None:
    selected = {
        k[len(prefix):]: torch.as_tensor(v) for k, v in params.items() if k.startswith(prefix)
    }
    try:
        module.load_state_dict(selected, strict=True)
    except RuntimeError as exc:
        raise ProtocolError(f"incompatible shared parameters: {exc}") from exc


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class Client:
    """One domain's training state for the disentangled dual-branch model."""

    def __init__(
        self,
        dataset: DomainDataset,
        model_cfg: ModelConfig,
        dropout: float,
        lr: float,
        seed: int,
    ):
        model_cfg.validate()
        dataset.validate()
        if not dataset.train:
            raise ConfigError(f"{dataset.domain_name}: no training sequences")
        self.dataset = dataset
        self.client_id = dataset.domain_name
        self.max_len = model_cfg.max_len
        self.graph = build_item_graph(dataset)
        self.adj = graph_to_torch(self.graph)
        enc_args = dict(
            vocab_size=dataset.vocab_size,
            embed_dim=model_cfg.embed_dim,
            max_len=model_cfg.max_len,
            num_gnn_layers=model_cfg.num_gnn_layers,
            num_attn_layers=model_cfg.num_attn_layers,
            num_heads=model_cfg.num_heads,
            dropout=dropout,
        )
        self._enc_args = enc_args
        self.shared_encoder = SequenceEncoder(**enc_args, seed=derive_seed(seed, "shared"))
        self.exclusive_encoder = SequenceEncoder(**enc_args, seed=derive_seed(seed, "exclusive"))
        self.predictor = Predictor(model_cfg.embed_dim, seed=derive_seed(seed, "predictor"))
        self.discriminator = Discriminator(model_cfg.embed_dim, seed=derive_seed(seed, "critic"))
        self.optimizers = {
            "shared": torch.optim.Adam(self.shared_encoder.parameters(), lr=lr),
            "exclusive": torch.optim.Adam(self.exclusive_encoder.parameters(), lr=lr),
            "predictor": torch.optim.Adam(self.predictor.parameters(), lr=lr),
            "critic": torch.optim.Adam(self.discriminator.parameters(), lr=lr),
        }
        self.gen = torch.Generator().manual_seed(derive_seed(seed, "stream"))
        self.train_users = sorted(dataset.train)
        self.train_items = torch.from_numpy(
            pad_batch([dataset.train[u].items for u in self.train_users], model_cfg.max_len)
        )

    # -- parameter exchange -------------------------------------------------

    def shared_state(self) -> dict[str, np.ndarray]:
        return _state_to_numpy(self.shared_encoder)

    def load_shared(self, params: dict[str, np.ndarray]) -> None:
        _load_numpy_state(self.shared_encoder, params)

    def fresh_shared_state(self, seed: int) -> dict[str, np.ndarray]:
        """Shared-branch initialization a server can broadcast at round 0."""
        return _state_to_numpy(SequenceEncoder(**self._enc_args, seed=seed))

    def local_state(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "shared_encoder": _state_to_numpy(self.shared_encoder),
            "exclusive_encoder": _state_to_numpy(self.exclusive_encoder),
            "predictor": _state_to_numpy(self.predictor),
            "discriminator": _state_to_numpy(self.discriminator),
        }

    def load_local_state(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        _load_numpy_state(self.shared_encoder, state["shared_encoder"])
        _load_numpy_state(self.exclusive_encoder, state["exclusive_encoder"])
        _load_numpy_state(self.predictor, state["predictor"])
        _load_numpy_state(self.discriminator, state["discriminator"])

    # -- training -----------------------------------------------------------

    def _item_table(self) -> torch.Tensor:
        # scoring table tied to the exclusive branch's input representation:
        # the raw embedding plus its graph-propagated view, so co-occurrence
        # structure shapes output scores from the very first step
        enc = self.exclusive_encoder
        return enc.item_emb.weight + enc.propagate_graph(self.adj)

    def _global_reps_for(self, users: list[str], rep_table: dict[str, np.ndarray]) -> torch.Tensor:
        d = self.shared_encoder.embed_dim
        rows = []
        for uid in users:
            rep = rep_table.get(uid)
            rows.append(torch.zeros(self.max_len, d) if rep is None else torch.as_tensor(rep))
        return torch.stack(rows)

    def local_update(self, down: DownMessage, cfg: TrainConfig) -> UpMessage:
        """Run the local epochs for one round and build the up-message."""
        cfg.validate()
        if down.shared_params is not None:
            self.load_shared(down.shared_params)
        w = cfg.weights
        # nothing to align to before the first aggregation: skip the
        # similarity term rather than training against an all-zero table
        beta = 0.0 if down.round == 0 else w.beta
        eff = LossWeights(alpha=w.alpha, beta=beta, gamma=w.gamma, lambda_=w.lambda_, tau=w.tau)

        n = self.train_items.shape[0]
        sums: dict[str, float] = {}
        batches = 0
        for epoch in range(cfg.local_epochs):
            order = torch.randperm(n, generator=self.gen)
            for start in range(0, n, cfg.batch_size):
                rows = order[start:start + cfg.batch_size]
                items = self.train_items[rows]
                users = [self.train_users[i] for i in rows.tolist()]
                z_global = self._global_reps_for(users, down.rep_table)

                dist_s = self.shared_encoder.encode(items, self.adj, training=True, gen=self.gen)
                dist_e = self.exclusive_encoder.encode(items, self.adj, training=True, gen=self.gen)
                z_s = sample(dist_s, torch.randn(dist_s.mu.shape, generator=self.gen))
                z_e = sample(dist_e, torch.randn(dist_e.mu.shape, generator=self.gen))
                z_aug = None
                if eff.lambda_ > 0:
                    aug_items = augment_shuffle(items, self.gen)
                    dist_a = self.exclusive_encoder.encode(
                        aug_items, self.adj, training=True, gen=self.gen
                    )
                    z_aug = sample(dist_a, torch.randn(dist_a.mu.shape, generator=self.gen))
                bundle = LatentBundle(z_s, z_e, z_aug)

                breakdown = disentanglement_loss(
                    bundle, dist_s, dist_e, items, z_global,
                    self.discriminator, self.predictor, self._item_table(), eff,
                )
                loss = breakdown.total
                stats = breakdown.detached()
                if eff.lambda_ > 0:
                    contrast = infonce_loss(
                        ContrastiveBatch(z_e[:, -1, :], z_aug[:, -1, :]), tau=eff.tau
                    )
                    loss = loss + eff.lambda_ * contrast
                    stats["contrastive"] = float(contrast.detach())
                    stats["total"] = float(loss.detach())

                if not torch.isfinite(loss):
                    raise TrainingAbort(
                        f"non-finite loss on client {self.client_id} "
                        f"(round {down.round}, epoch {epoch}, batch {batches})",
                        diagnostics={"round": down.round, "client": self.client_id,
                                     "epoch": epoch, "batch": batches, **stats},
                    )
                for opt in self.optimizers.values():
                    opt.zero_grad()
                loss.backward()
                for opt in self.optimizers.values():
                    opt.step()
                for key, value in stats.items():
                    sums[key] = sums.get(key, 0.0) + value
                batches += 1

        return UpMessage(
            client_id=self.client_id,
            shared_params=self.shared_state(),
            rep_table=self.representation_table(),
            sample_count=n,
            stats={k: v / batches for k, v in sums.items()},
        )

    # -- inference ----------------------------------------------------------

    def representation_table(self, batch_size: int = 512) -> dict[str, np.ndarray]:
        """Posterior-mean shared latents for every training user.

        Deterministic (evaluation-mode, mean of the posterior, no sampling) —
        this is the per-user summary uploaded for aggregation.
        """
        out: dict[str, np.ndarray] = {}
        with torch.no_grad():
            for start in range(0, len(self.train_users), batch_size):
                items = self.train_items[start:start + batch_size]
                mu = self.shared_encoder.encode(items, self.adj).mu
                for offset, uid in enumerate(self.train_users[start:start + batch_size]):
                    out[uid] = mu[offset].cpu().numpy().astype(np.float32)
        return out

    def score_contexts(self, items: torch.Tensor, fusion: str = "both") -> np.ndarray:
        """Final-position vocabulary logits for padded contexts (posterior means)."""
        with torch.no_grad():
            mu_s = self.shared_encoder.encode(items, self.adj).mu
            mu_e = self.exclusive_encoder.encode(items, self.adj).mu
            logits = predict_scores(mu_s, mu_e, self.predictor, self._item_table(), fusion)
        return logits.cpu().numpy()


class MonolithicClient:
    """Baseline client: one encoder, plain variational objective, and *all*
    parameters (encoder and predictor) shipped for averaging.

    This is the classical whole-model federated-averaging setup; it has no
    notion of shared versus exclusive factors, so averaging flattens any
    domain-specific structure into one global model.
    """

    def __init__(
        self,
        dataset: DomainDataset,
        model_cfg: ModelConfig,
        dropout: float,
        lr: float,
        seed: int,
    ):
        model_cfg.validate()
        dataset.validate()
        if not dataset.train:
            raise ConfigError(f"{dataset.domain_name}: no training sequences")
        self.dataset = dataset
        self.client_id = dataset.domain_name
        self.max_len = model_cfg.max_len
        self.graph = build_item_graph(dataset)
        self.adj = graph_to_torch(self.graph)
        self._enc_args = dict(
            vocab_size=dataset.vocab_size,
            embed_dim=model_cfg.embed_dim,
            max_len=model_cfg.max_len,
            num_gnn_layers=model_cfg.num_gnn_layers,
            num_attn_layers=model_cfg.num_attn_layers,
            num_heads=model_cfg.num_heads,
            dropout=dropout,
        )
        self.encoder = SequenceEncoder(**self._enc_args, seed=derive_seed(seed, "encoder"))
        self.predictor = Predictor(model_cfg.embed_dim, seed=derive_seed(seed, "predictor"))
        self.optimizer = torch.optim.Adam(
            list(self.encoder.parameters()) + list(self.predictor.parameters()), lr=lr
        )
        self.gen = torch.Generator().manual_seed(derive_seed(seed, "stream"))
        self.train_users = sorted(dataset.train)
        self.train_items = torch.from_numpy(
            pad_batch([dataset.train[u].items for u in self.train_users], model_cfg.max_len)
        )

    def shared_state(self) -> dict[str, np.ndarray]:
        state = _state_to_numpy(self.encoder, "encoder.")
        state.update(_state_to_numpy(self.predictor, "predictor."))
        return state

    def load_shared(self, params: dict[str, np.ndarray]) -> None:
        _load_numpy_state(self.encoder, params, "encoder.")
        _load_numpy_state(self.predictor, params, "predictor.")

    def fresh_shared_state(self, seed: int) -> dict[str, np.ndarray]:
        state = _state_to_numpy(SequenceEncoder(**self._enc_args, seed=derive_seed(seed, "encoder")), "encoder.")
        state.update(_state_to_numpy(Predictor(self._enc_args["embed_dim"], seed=derive_seed(seed, "predictor")), "predictor."))
        return state

    def local_state(self) -> dict[str, dict[str, np.ndarray]]:
        return {"encoder": _state_to_numpy(self.encoder), "predictor": _state_to_numpy(self.predictor)}

    def load_local_state(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        _load_numpy_state(self.encoder, state["encoder"])
        _load_numpy_state(self.predictor, state["predictor"])

    def _item_table(self) -> torch.Tensor:
        # same graph-informed weight tying as the dual-branch client
        return self.encoder.item_emb.weight + self.encoder.propagate_graph(self.adj)

    def local_update(self, down: DownMessage, cfg: TrainConfig) -> UpMessage:
        cfg.validate()
        if down.shared_params is not None:
            self.load_shared(down.shared_params)
        n = self.train_items.shape[0]
        sums: dict[str, float] = {}
        batches = 0
        for epoch in range(cfg.local_epochs):
            order = torch.randperm(n, generator=self.gen)
            for start in range(0, n, cfg.batch_size):
                items = self.train_items[order[start:start + cfg.batch_size]]
                dist = self.encoder.encode(items, self.adj, training=True, gen=self.gen)
                z = sample(dist, torch.randn(dist.mu.shape, generator=self.gen))
                kl = kl_to_standard_normal(dist, real_position_mask(items))
                nll = reconstruction_nll(z, items, self.predictor, self._item_table())
                loss = kl + nll
                if not torch.isfinite(loss):
                    raise TrainingAbort(
                        f"non-finite loss on client {self.client_id} "
                        f"(round {down.round}, epoch {epoch}, batch {batches})",
                        diagnostics={"round": down.round, "client": self.client_id,
                                     "kl": float(kl), "nll": float(nll)},
                    )
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
                for key, value in (
                    ("kl", float(kl.detach())),
                    ("nll", float(nll.detach())),
                    ("total", float(loss.detach())),
                ):
                    sums[key] = sums.get(key, 0.0) + value
                batches += 1
        return UpMessage(
            client_id=self.client_id,
            shared_params=self.shared_state(),
            rep_table={},
            sample_count=n,
            stats={k: v / batches for k, v in sums.items()},
        )

    def score_contexts(self, items: torch.Tensor, fusion: str = "both") -> np.ndarray:
        with torch.no_grad():
            mu = self.encoder.encode(items, self.adj).mu
            logits = self.predictor(mu) @ self._item_table().t()
        return logits[:, -1, :].cpu().numpy()


def client_update(client, down: DownMessage, cfg: TrainConfig) -> UpMessage:
    """Run one client's local round (thin functional wrapper)."""
    return client.local_update(down, cfg)


# ---------------------------------------------------------------------------
# Server-side aggregation
# ---------------------------------------------------------------------------

def _aggregation_weights(ups: list[UpMessage]) -> tuple[list[UpMessage], list[float]]:
    if not ups:
        raise ProtocolError("nothing to aggregate: no client updates")
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in updates: {sorted(ids)}")
    ordered = sorted(ups, key=lambda u: u.client_id)
    total = sum(u.sample_count for u in ordered)
    if total <= 0:
        raise ProtocolError("total sample count must be positive")
    return ordered, [u.sample_count / total for u in ordered]


def aggregate_params(ups: list[UpMessage]) -> dict[str, np.ndarray]:
    """Sample-count-weighted average of the uploaded parameter sets.

    Updates are processed in client-id order, so the result is exactly
    invariant to the order clients happened to finish in. All parameter
    sets must share names and shapes.
    """
    ordered, weights = _aggregation_weights(ups)
    names = set(ordered[0].shared_params)
    for up in ordered[1:]:
        if set(up.shared_params) != names:
            raise ProtocolError(
                f"client {up.client_id} uploaded a different parameter set"
            )
    out: dict[str, np.ndarray] = {}
    for name in sorted(names):
        ref = ordered[0].shared_params[name]
        acc = np.zeros(ref.shape, dtype=np.float64)
        for up, w in zip(ordered, weights):
            arr = up.shared_params[name]
            if arr.shape != ref.shape:
                raise ProtocolError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {ref.shape} "
                    f"(client {up.client_id})"
                )
            acc += w * arr.astype(np.float64)
        out[name] = acc.astype(ref.dtype)
    return out


def aggregate_representations(ups: list[UpMessage]) -> dict[str, np.ndarray]:
    """Per-user weighted average of uploaded latent tables.

    A user present in only some domains is averaged over the reporting
    clients, reweighting their sample counts to sum to one.
    """
    ordered, _ = _aggregation_weights(ups)
    users = sorted({u for up in ordered for u in up.rep_table})
    out: dict[str, np.ndarray] = {}
    for uid in users:
        entries = [(up.sample_count, up.rep_table[uid]) for up in ordered if uid in up.rep_table]
        total = sum(c for c, _ in entries)
        ref = entries[0][1]
        acc = np.zeros(ref.shape, dtype=np.float64)
        for count, arr in entries:
            if arr.shape != ref.shape:
                raise ProtocolError(f"latent shape mismatch for user {uid!r}")
            acc += (count / total) * arr.astype(np.float64)
        out[uid] = acc.astype(ref.dtype)
    return out


# ---------------------------------------------------------------------------
# The round loop
# ---------------------------------------------------------------------------

def run_federated(
    clients: list,
    cfg: TrainConfig,
    federate: bool = True,
) -> tuple[GlobalState, list[dict]]:
    """Train clients for up to ``cfg.rounds`` rounds with early stopping.

    With ``federate=False`` no messages are exchanged: clients simply train
    locally on the same schedule (the purely-local baseline).

    Early stopping watches the cross-domain average validation MRR; when it
    fails to improve for ``cfg.patience`` consecutive rounds, training stops
    and (by default) every client is rolled back to its best-round state.

    Returns the final global state and a per-round history: each record
    carries the round index, per-client training statistics, per-domain
    validation metrics, and their average.
    """
    cfg.validate()
    if not clients:
        raise ConfigError("run_federated needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {sorted(ids)}")

    state = GlobalState(
        shared_params=clients[0].fresh_shared_state(derive_seed(cfg.seed, "server")) if federate else None,
        rep_table={},
        round=0,
    )
    history: list[dict] = []
    best_mrr = -np.inf
    best_state = state
    best_snapshot = None
    stale = 0

    for rnd in range(cfg.rounds):
        down = DownMessage(
            shared_params=state.shared_params if federate else None,
            rep_table=state.rep_table if federate else {},
            round=rnd,
        )
        ups = [client_update(c, down, cfg) for c in clients]
        if federate:
            state = GlobalState(
                shared_params=aggregate_params(ups),
                rep_table=aggregate_representations(ups),
                round=rnd + 1,
            )
            for c in clients:
                c.load_shared(state.shared_params)
        else:
            state = GlobalState(None, {}, rnd + 1)

        val = evaluate_clients(
            clients, "valid", fusion="both",
            k=cfg.eval_k, negatives=cfg.negatives_per_eval, seed=cfg.seed,
        )
        record = {
            "round": rnd,
            "train": {up.client_id: up.stats for up in ups},
            "valid": val.per_domain,
            "avg_valid": val.average,
        }
        history.append(record)
        avg_mrr = val.average["mrr"]
        logger.info("round %d: avg valid mrr %.4f", rnd, avg_mrr)

        if avg_mrr > best_mrr:
            best_mrr = avg_mrr
            stale = 0
            best_state = state
            if cfg.restore_best:
                best_snapshot = [copy.deepcopy(c.local_state()) for c in clients]
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stop after round %d (no improvement for %d rounds)", rnd, stale)
                break

    if cfg.restore_best and best_snapshot is not None:
        for client, snap in zip(clients, best_snapshot):
            client.load_local_state(snap)
        state = best_state
    return state, history


def make_client(
    dataset: DomainDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    monolithic: bool = False,
):
    """Build a client seeded deterministically from the run seed and domain name."""
    seed = derive_seed(cfg.seed, "client", dataset.domain_name)
    cls = MonolithicClient if monolithic else Client
    return cls(dataset, model_cfg, dropout=cfg.dropout, lr=cfg.lr, seed=seed)


# ---------------------------------------------------------------------------
# Training variants
# ---------------------------------------------------------------------------

VARIANTS = ("full", "no_contrast", "no_disentangle", "local_only", "fedavg_monolithic")


@dataclasses.dataclass
class VariantSpec:
    """How a named variant changes the run: effective loss weights, whether
    clients are monolithic, and whether any aggregation happens."""

    weights: LossWeights
    monolithic: bool
    federate: bool


def resolve_variant(variant: str, weights: LossWeights) -> VariantSpec:
    """Effective settings for a variant, starting from the configured weights.

    * ``full`` — the complete objective, federated.
    * ``no_contrast`` — drops the contrastive term (lambda = 0).
    * ``no_disentangle`` — additionally drops the similarity and exclusive
      reconstruction terms (beta = gamma = lambda = 0), leaving a plain
      dual-branch variational objective; still federated.
    * ``local_only`` — full objective but no message exchange; beta is
      forced to 0 because no aggregated latents exist to align to.
    * ``fedavg_monolithic`` — single-branch clients with a plain variational
      objective, every parameter averaged.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    w = dataclasses.replace(weights)
    monolithic = False
    federate = True
    if variant == "no_contrast":
        w.lambda_ = 0.0
    elif variant == "no_disentangle":
        w.beta = 0.0
        w.gamma = 0.0
        w.lambda_ = 0.0
    elif variant == "local_only":
        w.beta = 0.0
        federate = False
    elif variant == "fedavg_monolithic":
        monolithic = True
    return VariantSpec(weights=w, monolithic=monolithic, federate=federate)


def run_variant(
    datasets: list[DomainDataset],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    variant: str = "full",
) -> tuple[list, GlobalState, list[dict]]:
    """Build clients for a variant and train them; returns (clients, state, history)."""
    spec = resolve_variant(variant, cfg.weights)
    eff_cfg = dataclasses.replace(cfg, weights=spec.weights)
    clients = [make_client(ds, model_cfg, eff_cfg, monolithic=spec.monolithic) for ds in datasets]
    state, history = run_federated(clients, eff_cfg, federate=spec.federate)
    return clients, state, history
