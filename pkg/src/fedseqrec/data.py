"""Multi-domain sequential interaction data.

Covers ingestion of raw rating logs, corpus filtering and chronological
splitting, item transition graphs, JSON (de)serialization, and a synthetic
multi-domain scenario generator used by the default experiment presets.

Conventions shared by every consumer in this package:

* item index 0 is the padding token and never a real item;
* real items in a domain are indexed ``1 .. vocab_size - 1``;
* user ids are strings, and the same id appearing in several domains refers
  to the same person (the cross-domain signal federation tries to exploit).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import Counter

import numpy as np
from scipy import sparse

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

PAD = 0
DATASET_SCHEMA_VERSION = 1


@dataclasses.dataclass
class UserSequence:
    """One user's chronologically ordered interactions within a single domain."""

    user_id: str
    items: list[int]
    timestamps: list[int] | None = None

    def __post_init__(self):
        if self.timestamps is not None and len(self.timestamps) != len(self.items):
            raise ConfigError(
                f"user {self.user_id}: {len(self.items)} items but "
                f"{len(self.timestamps)} timestamps"
            )

    def __len__(self) -> int:
        return len(self.items)


@dataclasses.dataclass
class DomainDataset:
    """All sequences of one domain, partitioned into train/valid/test fragments.

    ``train[uid].items + valid[uid].items + test[uid].items`` is the user's
    full chronological stream; the split fragments never overlap.
    """

    domain_name: str
    vocab_size: int
    train: dict[str, UserSequence]
    valid: dict[str, UserSequence]
    test: dict[str, UserSequence]
    item_ids: list[str] | None = None  # position i = original id of item index i

    @property
    def users(self) -> set[str]:
        return set(self.train) | set(self.valid) | set(self.test)

    @property
    def size(self) -> int:
        """Number of training sequences (the weight this domain carries in aggregation)."""
        return len(self.train)

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"{self.domain_name}: vocab_size must be >= 2 (pad + one item)")
        for split in (self.train, self.valid, self.test):
            for uid, seq in split.items():
                if uid != seq.user_id:
                    raise ConfigError(f"{self.domain_name}: key {uid!r} != user_id {seq.user_id!r}")
                for it in seq.items:
                    if not (1 <= it < self.vocab_size):
                        raise ConfigError(
                            f"{self.domain_name}: item {it} of user {uid} outside "
                            f"[1, {self.vocab_size - 1}]"
                        )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_CSV_HEADER = ("user_id", "item_id", "rating", "timestamp")


def _parse_rows(path: str) -> tuple[list[tuple[str, str, int]], int]:
    """Read (user, item, timestamp) triples from a CSV or JSON-lines file.

    Malformed rows are skipped and counted; ratings are ignored (presence of
    an interaction is all the sequence model consumes).
    """
    rows: list[tuple[str, str, int]] = []
    bad = 0
    if path.endswith(".csv"):
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                if lineno == 0 and tuple(x.strip().lower() for x in row[:4]) == _CSV_HEADER:
                    continue  # optional header line
                try:
                    user, item, _rating, ts = row[0], row[1], row[2], int(float(row[3]))
                    if not user or not item:
                        raise ValueError("empty id")
                except (ValueError, IndexError):
                    bad += 1
                    continue
                rows.append((user, item, ts))
    else:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    user, item = str(rec["user_id"]), str(rec["item_id"])
                    ts = int(float(rec["timestamp"]))
                    if not user or not item:
                        raise ValueError("empty id")
                except (ValueError, KeyError, TypeError):
                    bad += 1
                    continue
                rows.append((user, item, ts))
    return rows, bad


def ingest_interaction_log(path: str, domain_name: str) -> DomainDataset:
    """Build an unsplit DomainDataset from one raw interaction file.

    ``path`` may be a CSV (``user_id,item_id,rating,timestamp`` per line,
    header optional) or a JSON-lines file with those keys. All interactions
    land in ``train``; run :func:`preprocess` to filter and split.
    """
    rows, bad = _parse_rows(path)
    if bad:
        logger.warning("%s: skipped %d malformed row(s) in %s", domain_name, bad, path)
    if not rows:
        raise ConfigError(f"{domain_name}: no usable interactions in {path}")

    item_index: dict[str, int] = {}
    for item in sorted({r[1] for r in rows}):
        item_index[item] = len(item_index) + 1

    per_user: dict[str, list[tuple[int, int, int]]] = {}
    for order, (user, item, ts) in enumerate(rows):
        per_user.setdefault(user, []).append((ts, order, item_index[item]))

    train: dict[str, UserSequence] = {}
    for uid in sorted(per_user):
        events = sorted(per_user[uid])  # by timestamp, ties by file order
        train[uid] = UserSequence(
            user_id=uid,
            items=[e[2] for e in events],
            timestamps=[e[0] for e in events],
        )
    item_ids = ["<pad>"] + sorted(item_index, key=item_index.get)
    ds = DomainDataset(domain_name, len(item_index) + 1, train, {}, {}, item_ids)
    ds.validate()
    return ds


def ingest_scenario(root: str, domain_names: list[str]) -> list[DomainDataset]:
    """Ingest one file per domain from ``root`` (tries .csv, .json, .jsonl)."""
    import os

    out = []
    for name in domain_names:
        for ext in (".csv", ".json", ".jsonl"):
            path = os.path.join(root, name + ext)
            if os.path.exists(path):
                out.append(ingest_interaction_log(path, name))
                break
        else:
            raise ConfigError(f"no interaction file for domain {name!r} under {root}")
    return out


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------

def chronological_split(items: list[int]) -> tuple[list[int], list[int], list[int]]:
    """Split one stream into (train, valid, test) by recency.

    The most recent ~20% of interactions are held out and divided between
    validation (earlier half, rounded down) and test (the remainder), so the
    test fragment is never smaller than the validation fragment.
    """
    n = len(items)
    if n < 3:
        raise ConfigError(f"cannot split a sequence of length {n}")
    n_holdout = max(1, round(n * 0.2))
    n_valid = n_holdout // 2
    train = items[: n - n_holdout]
    valid = items[n - n_holdout: n - n_holdout + n_valid]
    test = items[n - n_holdout + n_valid:]
    return train, valid, test


def preprocess(
    raw: DomainDataset,
    min_interactions: int = 10,
    min_len: int = 4,
    max_len: int = 16,
) -> DomainDataset:
    """Filter a raw domain and split each user chronologically.

    Users and items with fewer than ``min_interactions`` occurrences are
    removed, sequences shorter than ``min_len`` are dropped, and sequences
    are truncated to their most recent ``max_len`` items. Because removing
    an item shortens sequences (and may push users or other items under
    their thresholds), the rules are iterated to a fixed point — which also
    makes the whole function idempotent: preprocessing an already
    preprocessed domain returns it unchanged.

    Item indices are re-packed to a dense ``1..n`` range afterwards.
    """
    if min_len < 1 or max_len < min_len:
        raise ConfigError(f"invalid length window [{min_len}, {max_len}]")

    merged: dict[str, tuple[list[int], list[int] | None]] = {}
    for uid in sorted(raw.users):
        items: list[int] = []
        stamps: list[int] | None = [] if any(
            uid in s and s[uid].timestamps is not None for s in (raw.train, raw.valid, raw.test)
        ) else None
        for split in (raw.train, raw.valid, raw.test):
            if uid in split:
                items.extend(split[uid].items)
                if stamps is not None:
                    ts = split[uid].timestamps
                    stamps.extend(ts if ts is not None else [0] * len(split[uid].items))
        merged[uid] = (items, stamps)

    def trim(uid: str, keep_mask: list[bool]) -> None:
        items, stamps = merged[uid]
        merged[uid] = (
            [x for x, k in zip(items, keep_mask) if k],
            None if stamps is None else [t for t, k in zip(stamps, keep_mask) if k],
        )

    changed = True
    while changed:
        changed = False
        counts: Counter = Counter()
        for items, _ in merged.values():
            counts.update(items)
        keep_items = {i for i, c in counts.items() if c >= min_interactions}
        for uid in list(merged):
            items, _ = merged[uid]
            mask = [i in keep_items for i in items]
            if not all(mask):
                trim(uid, mask)
                changed = True
        for uid in list(merged):
            items, _ = merged[uid]
            if len(items) < max(min_interactions, min_len):
                del merged[uid]
                changed = True
        for uid in list(merged):
            items, stamps = merged[uid]
            if len(items) > max_len:
                merged[uid] = (
                    items[-max_len:],
                    None if stamps is None else stamps[-max_len:],
                )
                changed = True

    if not merged:
        raise ConfigError(f"{raw.domain_name}: domain empty after filtering")

    used = sorted({i for items, _ in merged.values() for i in items})
    remap = {old: new for new, old in enumerate(used, start=1)}
    item_ids = None
    if raw.item_ids is not None:
        item_ids = ["<pad>"] + [raw.item_ids[old] for old in used]

    train: dict[str, UserSequence] = {}
    valid: dict[str, UserSequence] = {}
    test: dict[str, UserSequence] = {}
    for uid, (items, stamps) in merged.items():
        items = [remap[i] for i in items]
        tr, va, te = chronological_split(items)
        cut1, cut2 = len(tr), len(tr) + len(va)
        stamps = stamps if stamps is not None else None
        train[uid] = UserSequence(uid, tr, None if stamps is None else stamps[:cut1])
        if va:
            valid[uid] = UserSequence(uid, va, None if stamps is None else stamps[cut1:cut2])
        if te:
            test[uid] = UserSequence(uid, te, None if stamps is None else stamps[cut2:])

    out = DomainDataset(raw.domain_name, len(used) + 1, train, valid, test, item_ids)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Item transition graph
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ItemGraph:
    """Row-normalized item transition graph over one domain's vocabulary.

    ``adjacency[i, j]`` is the normalized weight of the (symmetric, binary)
    edge between items that appeared adjacently in some training sequence;
    every row carries a self-loop, so rows always sum to one. Row 0 is the
    padding token, which only ever connects to itself.
    """

    adjacency: sparse.csr_matrix

    @property
    def num_items(self) -> int:
        return self.adjacency.shape[0]


def build_item_graph(dataset: DomainDataset) -> ItemGraph:
    """Binary adjacent-co-occurrence graph from the training fragments."""
    v = dataset.vocab_size
    edges: set[tuple[int, int]] = set()
    for seq in dataset.train.values():
        for a, b in zip(seq.items, seq.items[1:]):
            if a != b:
                edges.add((a, b))
                edges.add((b, a))
    rows = [i for i, _ in edges] + list(range(v))
    cols = [j for _, j in edges] + list(range(v))
    vals = np.ones(len(rows), dtype=np.float64)
    adj = sparse.coo_matrix((vals, (rows, cols)), shape=(v, v)).tocsr()
    row_sums = np.asarray(adj.sum(axis=1)).ravel()
    inv = sparse.diags(1.0 / row_sums)
    return ItemGraph((inv @ adj).tocsr())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def dataset_to_dict(ds: DomainDataset) -> dict:
    def split_dict(split: dict[str, UserSequence]) -> dict:
        return {
            uid: {"items": seq.items, "timestamps": seq.timestamps}
            for uid, seq in split.items()
        }

    return {
        "schema_version": DATASET_SCHEMA_VERSION,
        "domain_name": ds.domain_name,
        "vocab_size": ds.vocab_size,
        "item_ids": ds.item_ids,
        "splits": {
            "train": split_dict(ds.train),
            "valid": split_dict(ds.valid),
            "test": split_dict(ds.test),
        },
    }


def dataset_from_dict(payload: dict) -> DomainDataset:
    version = payload.get("schema_version")
    if version != DATASET_SCHEMA_VERSION:
        raise ConfigError(f"unsupported dataset schema_version {version!r}")

    def split_from(d: dict) -> dict[str, UserSequence]:
        return {
            uid: UserSequence(uid, list(rec["items"]), rec.get("timestamps"))
            for uid, rec in d.items()
        }

    ds = DomainDataset(
        domain_name=payload["domain_name"],
        vocab_size=payload["vocab_size"],
        train=split_from(payload["splits"]["train"]),
        valid=split_from(payload["splits"]["valid"]),
        test=split_from(payload["splits"]["test"]),
        item_ids=payload.get("item_ids"),
    )
    ds.validate()
    return ds


def save_datasets(path: str, datasets: list[DomainDataset]) -> None:
    with open(path, "w") as fh:
        json.dump([dataset_to_dict(d) for d in datasets], fh)


def load_datasets(path: str) -> list[DomainDataset]:
    with open(path) as fh:
        payload = json.load(fh)
    return [dataset_from_dict(d) for d in payload]


# ---------------------------------------------------------------------------
# Synthetic scenario generator
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ScenarioConfig:
    """Generator settings for a synthetic multi-domain scenario.

    Every user exists in every domain. Item choices are driven by two latent
    preference layers: a *shared* preference over item clusters whose
    item-to-cluster rule is identical in every domain (so the signal is
    alignable across domains), and a per-(user, domain) *exclusive*
    preference over clusters defined by a domain-private permutation of the
    item space (so it cannot transfer). ``heterogeneity`` is the probability
    that a given interaction is driven by the exclusive layer.

    Two knobs shape how learnable the sequences are.  ``popularity_exponent``
    skews within-cluster item choice toward a few head items (weight
    proportional to 1/rank**exponent; 0 recovers uniform), giving models an
    item-popularity signal.  ``cluster_persistence`` is the probability that
    a position reuses the previous position's cluster instead of drawing a
    fresh one from the user's preference, provided both positions are driven
    by the same layer; this plants short-range sequential structure while
    leaving every position's marginal cluster distribution equal to the
    user preference.
    """

    num_domains: int = 3
    users: int = 300
    shared_factors: int = 10
    exclusive_factors: int = 10
    vocab_per_domain: int = 200
    seq_len_range: tuple[int, int] = (12, 16)
    heterogeneity: float = 0.6
    preference_concentration: float = 0.15
    cluster_persistence: float = 0.85
    popularity_exponent: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if self.users < 1:
            raise ConfigError("users must be >= 1")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError(f"heterogeneity {self.heterogeneity} outside [0, 1]")
        lo, hi = self.seq_len_range
        if lo < 4 or hi > 16 or lo > hi:
            raise ConfigError(f"seq_len_range {self.seq_len_range} must satisfy 4 <= lo <= hi <= 16")
        if self.shared_factors < 1 or self.exclusive_factors < 1:
            raise ConfigError("factor counts must be >= 1")
        if self.vocab_per_domain < max(self.shared_factors, self.exclusive_factors):
            raise ConfigError("vocab_per_domain smaller than the number of clusters")
        if self.preference_concentration <= 0:
            raise ConfigError("preference_concentration must be > 0")
        if not 0.0 <= self.cluster_persistence < 1.0:
            raise ConfigError(
                f"cluster_persistence {self.cluster_persistence} outside [0, 1)"
            )
        if self.popularity_exponent < 0:
            raise ConfigError("popularity_exponent must be >= 0")


def shared_cluster_of(item: int, shared_factors: int) -> int:
    """Deterministic shared-cluster label of a (1-based) item index.

    The same rule applies in every domain, which is what makes the shared
    preference layer alignable across domains.
    """
    return (item - 1) % shared_factors


def _popularity_weights(n: int, exponent: float) -> np.ndarray:
    """Normalized 1/rank**exponent weights over ``n`` items."""
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def synthesize_scenario(cfg: ScenarioConfig) -> tuple[list[DomainDataset], dict]:
    """Generate datasets plus the latent factors that produced them.

    The factor dict (user preferences and cluster assignments) is returned
    for inspection and statistical tests; :func:`generate_synthetic` is the
    plain variant that discards it.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_items = cfg.vocab_per_domain
    user_ids = [f"u{idx:04d}" for idx in range(cfg.users)]

    shared_cluster = np.array([shared_cluster_of(i, cfg.shared_factors) for i in range(1, n_items + 1)])
    shared_items = [np.flatnonzero(shared_cluster == c) + 1 for c in range(cfg.shared_factors)]
    shared_weights = [_popularity_weights(len(p), cfg.popularity_exponent) for p in shared_items]
    shared_pref = rng.dirichlet(
        np.full(cfg.shared_factors, cfg.preference_concentration), size=cfg.users
    )

    datasets: list[DomainDataset] = []
    factors: dict = {
        "user_ids": user_ids,
        "shared_cluster": shared_cluster,
        "shared_pref": shared_pref,
        "exclusive_cluster": {},
        "exclusive_pref": {},
    }
    lo, hi = cfg.seq_len_range
    for k in range(cfg.num_domains):
        name = f"domain_{chr(ord('a') + k)}" if k < 26 else f"domain_{k}"
        perm = rng.permutation(n_items)
        excl_cluster = perm * cfg.exclusive_factors // n_items
        excl_items = [np.flatnonzero(excl_cluster == c) + 1 for c in range(cfg.exclusive_factors)]
        excl_weights = [_popularity_weights(len(p), cfg.popularity_exponent) for p in excl_items]
        excl_pref = rng.dirichlet(
            np.full(cfg.exclusive_factors, cfg.preference_concentration), size=cfg.users
        )
        factors["exclusive_cluster"][name] = excl_cluster
        factors["exclusive_pref"][name] = excl_pref

        train: dict[str, UserSequence] = {}
        valid: dict[str, UserSequence] = {}
        test: dict[str, UserSequence] = {}
        for u, uid in enumerate(user_ids):
            length = int(rng.integers(lo, hi + 1))
            exclusive_driven = rng.random(length) < cfg.heterogeneity
            items = []
            prev_cluster = -1
            prev_exclusive = False
            for pos in range(length):
                driven = bool(exclusive_driven[pos])
                sticky = (
                    pos > 0
                    and driven == prev_exclusive
                    and rng.random() < cfg.cluster_persistence
                )
                if driven:
                    c = prev_cluster if sticky else int(rng.choice(cfg.exclusive_factors, p=excl_pref[u]))
                    pool, w = excl_items[c], excl_weights[c]
                else:
                    c = prev_cluster if sticky else int(rng.choice(cfg.shared_factors, p=shared_pref[u]))
                    pool, w = shared_items[c], shared_weights[c]
                items.append(int(rng.choice(pool, p=w)))
                prev_cluster, prev_exclusive = c, driven
            tr, va, te = chronological_split(items)
            n_tr, n_va = len(tr), len(va)
            train[uid] = UserSequence(uid, tr, list(range(n_tr)))
            if va:
                valid[uid] = UserSequence(uid, va, list(range(n_tr, n_tr + n_va)))
            if te:
                test[uid] = UserSequence(uid, te, list(range(n_tr + n_va, length)))
        ds = DomainDataset(name, n_items + 1, train, valid, test)
        ds.validate()
        datasets.append(ds)
    return datasets, factors


def generate_synthetic(cfg: ScenarioConfig) -> list[DomainDataset]:
    """Generate a deterministic synthetic scenario (see :class:`ScenarioConfig`)."""
    datasets, _ = synthesize_scenario(cfg)
    return datasets
