"""Next-item ranking evaluation with sampled negatives.

Each held-out interaction becomes one ranking instance: the model scores the
true next item against ``n`` sampled negatives given everything the user did
before it. Negatives are drawn from a seeded stream keyed by (seed, domain,
split, user, position), so results never depend on evaluation order or on
any training RNG state. Ties rank pessimistically (a negative scoring equal
to the target counts as beating it).
"""
from __future__ import annotations

import dataclasses
import warnings

import numpy as np
import torch

from .data import PAD, DomainDataset
from .utils import derive_seed, pad_batch


@dataclasses.dataclass
class EvalInstance:
    """One ranking task: predict ``target`` from the items before it."""

    user_id: str
    context: list[int]
    target: int
    position: int  # index of the target within the user's held-out fragment


def make_eval_instances(dataset: DomainDataset, split: str) -> list[EvalInstance]:
    """Expand a held-out split into ranking instances with full prior context.

    Validation instances see the training fragment; test instances also see
    the validation fragment, mirroring deployment where everything observed
    so far is usable.
    """
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    fragment = dataset.valid if split == "valid" else dataset.test
    out: list[EvalInstance] = []
    for uid in sorted(fragment):
        prior: list[int] = []
        if uid in dataset.train:
            prior += dataset.train[uid].items
        if split == "test" and uid in dataset.valid:
            prior += dataset.valid[uid].items
        items = fragment[uid].items
        for j, target in enumerate(items):
            context = prior + items[:j]
            if context:
                out.append(EvalInstance(uid, context, target, j))
    return out


def user_history(dataset: DomainDataset, uid: str) -> set[int]:
    """Every item the user interacted with in any split."""
    hist: set[int] = set()
    for split in (dataset.train, dataset.valid, dataset.test):
        if uid in split:
            hist.update(split[uid].items)
    return hist


def sample_negatives(
    history: set[int],
    vocab_size: int,
    n: int,
    rng: np.random.Generator,
    target: int,
) -> np.ndarray:
    """Draw ``n`` distinct negative items, never the pad, target, or history.

    If the vocabulary cannot supply ``n`` candidates outside the user's
    history, the history exclusion is relaxed (with a warning); if even
    pad/target exclusion leaves fewer than ``n`` items, all of them are
    returned (with a warning).
    """
    excluded = set(history) | {PAD, target}
    candidates = np.array([i for i in range(1, vocab_size) if i not in excluded], dtype=np.int64)
    if len(candidates) >= n:
        return rng.choice(candidates, size=n, replace=False)
    warnings.warn(
        f"only {len(candidates)} candidates outside the user history; "
        "relaxing exclusion to pad and target only"
    )
    relaxed = np.array([i for i in range(1, vocab_size) if i != target], dtype=np.int64)
    if len(relaxed) >= n:
        return rng.choice(relaxed, size=n, replace=False)
    warnings.warn(f"vocabulary supplies only {len(relaxed)} negatives of {n} requested")
    return relaxed


def rank_of_target(scores: np.ndarray, target: int, negatives: np.ndarray) -> int:
    """1-based rank of the target among target + negatives, ties counted against it."""
    target_score = scores[target]
    return 1 + int((scores[negatives] >= target_score).sum())


def compute_metrics(ranks, k: int = 10) -> dict[str, float]:
    """MRR, hit rate and NDCG at cutoff ``k`` from 1-based ranks."""
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("compute_metrics needs at least one rank")
    if (r < 1).any():
        raise ValueError("ranks are 1-based")
    hit = r <= k
    return {
        "mrr": float((1.0 / r).mean()),
        f"hr@{k}": float(hit.mean()),
        f"ndcg@{k}": float(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0).mean()),
    }


def predict_scores(
    z_shared: torch.Tensor,
    z_exclusive: torch.Tensor,
    predictor,
    item_table: torch.Tensor,
    fusion: str = "both",
) -> torch.Tensor:
    """Vocabulary logits at the final position under a fusion mode.

    ``both`` scores the sum of the branches (the deployment mode); the
    single-branch modes exist to probe how much each branch carries alone.
    Because fusion is additive, a zero exclusive latent makes ``both``
    coincide with ``shared`` exactly.
    """
    if fusion == "both":
        z = z_shared + z_exclusive
    elif fusion == "shared":
        z = z_shared
    elif fusion == "exclusive":
        z = z_exclusive
    else:
        raise ValueError(f"unknown fusion mode {fusion!r}")
    logits = predictor(z) @ item_table.t()
    return logits[:, -1, :]


@dataclasses.dataclass
class EvalResult:
    """Ranking metrics per domain plus their cross-domain (unweighted) average."""

    per_domain: dict[str, dict[str, float]]
    average: dict[str, float]
    fusion_mode: str
    k: int
    split: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_client(
    client,
    split: str,
    fusion: str = "both",
    k: int = 10,
    negatives: int = 99,
    seed: int = 0,
    batch_size: int = 512,
) -> tuple[dict[str, float], list[int]]:
    """Rank every held-out instance of one client's domain.

    ``client`` needs a ``dataset``, a ``max_len`` and a
    ``score_contexts(items, fusion)`` method returning final-position
    vocabulary logits; scoring runs on posterior means, so repeated calls
    are deterministic.
    """
    dataset = client.dataset
    instances = make_eval_instances(dataset, split)
    if not instances:
        raise ValueError(f"{dataset.domain_name}: no {split} instances to evaluate")
    contexts = pad_batch([inst.context for inst in instances], client.max_len)
    rows = []
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            batch = torch.from_numpy(contexts[start:start + batch_size])
            rows.append(np.asarray(client.score_contexts(batch, fusion)))
    logits = np.concatenate(rows, axis=0)

    histories = {uid: user_history(dataset, uid) for uid in {i.user_id for i in instances}}
    ranks = []
    for i, inst in enumerate(instances):
        rng = np.random.default_rng(
            derive_seed(seed, "negatives", dataset.domain_name, split, inst.user_id, inst.position)
        )
        negs = sample_negatives(histories[inst.user_id], dataset.vocab_size, negatives, rng, inst.target)
        ranks.append(rank_of_target(logits[i], inst.target, negs))
    return compute_metrics(ranks, k), ranks


def evaluate_clients(
    clients,
    split: str,
    fusion: str = "both",
    k: int = 10,
    negatives: int = 99,
    seed: int = 0,
) -> EvalResult:
    """Evaluate every client and average the metrics across domains."""
    per_domain = {}
    for client in clients:
        metrics, _ = evaluate_client(client, split, fusion, k, negatives, seed)
        per_domain[client.client_id] = metrics
    names = next(iter(per_domain.values())).keys()
    average = {
        name: float(np.mean([m[name] for m in per_domain.values()])) for name in names
    }
    return EvalResult(per_domain, average, fusion, k, split)
