"""Closed-form oracle checks behind the ``oracle-check`` CLI verb.

Each check computes a reference value with plain ``math`` arithmetic —
independent of the tensor code paths — and compares it against the package
implementation on the same small input. These are the hand-checkable
identities the numerical core is contractually required to reproduce.
"""
from __future__ import annotations

import dataclasses
import math
import time

import numpy as np
import torch

from . import evaluation
from .contrastive import ContrastiveBatch, infonce_loss
from .data import DomainDataset, UserSequence, build_item_graph, chronological_split
from .disentangle import Discriminator, jsd_similarity, kl_to_standard_normal, next_item_nll
from .encoder import LatentDist, SequenceEncoder, graph_to_torch
from .federation import UpMessage, aggregate_params

TOLERANCE = 1e-6


@dataclasses.dataclass
class OracleCheck:
    name: str
    expected: float
    actual: float

    @property
    def ok(self) -> bool:
        return abs(self.expected - self.actual) <= TOLERANCE


def _softmax_nll(logits: list[float], target: int) -> float:
    # independent reference: direct softmax via math.exp
    exp = [math.exp(v) for v in logits]
    return -math.log(exp[target] / sum(exp))


def _check_kl() -> list[OracleCheck]:
    checks = []
    mask = torch.tensor([[True]])

    def run(mu: float, sigma: float) -> float:
        dist = LatentDist(
            mu=torch.full((1, 1, 1), mu, dtype=torch.float64),
            sigma=torch.full((1, 1, 1), sigma, dtype=torch.float64),
        )
        return float(kl_to_standard_normal(dist, mask))

    # reference: 0.5 * (mu^2 + sigma^2 - 1 - 2 ln sigma), one dimension
    checks.append(OracleCheck(
        "kl unit-shifted (mu=1, sigma=1)",
        0.5 * (1.0 + 1.0 - 1.0 - 2.0 * math.log(1.0)),
        run(1.0, 1.0),
    ))
    checks.append(OracleCheck(
        "kl wide (mu=0, sigma=e)",
        0.5 * (0.0 + math.e ** 2 - 1.0 - 2.0 * math.log(math.e)),
        run(0.0, math.e),
    ))
    checks.append(OracleCheck("kl standard normal (mu=0, sigma=1)", 0.0, run(0.0, 1.0)))
    return checks


def _check_nll() -> list[OracleCheck]:
    checks = []

    def run(logit_row: list[float], target: int) -> float:
        vocab = len(logit_row)
        logits = torch.zeros((1, 2, vocab), dtype=torch.float64)
        logits[0, 0] = torch.tensor(logit_row, dtype=torch.float64)
        items = torch.tensor([[1, target]])
        return float(next_item_nll(logits, items))

    # target holds logit 1, the two other classes logit 0
    checks.append(OracleCheck(
        "nll three-way (target logit 1, rest 0)",
        _softmax_nll([0.0, 1.0, 0.0], 1),
        run([0.0, 1.0, 0.0], 1),
    ))
    checks.append(OracleCheck(
        "nll uniform two-way = ln 2",
        math.log(2.0),
        run([0.5, 0.5], 1),
    ))
    checks.append(OracleCheck(
        "nll near-certain prediction -> 0",
        _softmax_nll([-30.0, 30.0, -30.0], 1),
        run([-30.0, 30.0, -30.0], 1),
    ))
    return checks


def _check_jsd() -> list[OracleCheck]:
    disc = Discriminator(3).double()
    with torch.no_grad():
        disc.weight.zero_()
        disc.bias.zero_()
    gen = torch.Generator().manual_seed(5)
    a = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    b = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    c = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    # blank critic scores everything 0: bound = -softplus(0) - softplus(0) = -2 ln 2
    with torch.no_grad():
        bound = float(jsd_similarity(a, b, c, disc))
    return [OracleCheck("jsd bound with blank critic = -2 ln 2", -2.0 * math.log(2.0), bound)]


def _check_infonce() -> list[OracleCheck]:
    anchors = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    positives = anchors.clone()
    # every direction: positive similarity 1, two orthogonal negatives,
    # tau=1 -> loss = -ln(e / (e + 2))
    expected = -math.log(math.e / (math.e + 2.0))
    actual = float(infonce_loss(ContrastiveBatch(anchors, positives), tau=1.0))
    single = float(infonce_loss(
        ContrastiveBatch(anchors[:1], positives[:1]), tau=1.0
    ))
    return [
        OracleCheck("infonce two orthogonal pairs (tau=1)", expected, actual),
        OracleCheck("infonce single pair = 0", 0.0, single),
    ]


def _check_metrics() -> list[OracleCheck]:
    checks = []
    m = evaluation.compute_metrics([3], k=10)
    checks.append(OracleCheck("metrics rank 3: mrr", 1.0 / 3.0, m["mrr"]))
    checks.append(OracleCheck("metrics rank 3: hr@10", 1.0, m["hr@10"]))
    checks.append(OracleCheck("metrics rank 3: ndcg@10 = 1/log2(4)", 1.0 / math.log2(4.0), m["ndcg@10"]))
    m = evaluation.compute_metrics([1], k=10)
    checks.append(OracleCheck("metrics rank 1: ndcg@10", 1.0, m["ndcg@10"]))
    m = evaluation.compute_metrics([11], k=10)
    checks.append(OracleCheck("metrics rank 11: hr@10", 0.0, m["hr@10"]))
    checks.append(OracleCheck("metrics rank 11: ndcg@10", 0.0, m["ndcg@10"]))
    checks.append(OracleCheck("metrics rank 11: mrr", 1.0 / 11.0, m["mrr"]))
    return checks


def _check_aggregation() -> list[OracleCheck]:
    ups = [
        UpMessage("a", {"w": np.zeros((2, 2), dtype=np.float32)}, {}, 1),
        UpMessage("b", {"w": np.full((2, 2), 4.0, dtype=np.float32)}, {}, 3),
    ]
    agg = aggregate_params(ups)
    expected = (1 * 0.0 + 3 * 4.0) / 4
    return [OracleCheck("aggregation 1:3 weighted mean of 0 and 4", expected, float(agg["w"][0, 0]))]


def _tiny_two_item_dataset() -> DomainDataset:
    seq = UserSequence("u0", [1, 2, 1, 2])
    return DomainDataset("toy", 3, {"u0": seq}, {}, {}, None)


def _check_graph() -> list[OracleCheck]:
    graph = build_item_graph(_tiny_two_item_dataset())
    dense = graph.adjacency.toarray()
    # items 1 and 2 adjacent: row 1 = {1: 0.5, 2: 0.5}; pad row = self-loop
    return [
        OracleCheck("graph row self weight", 0.5, float(dense[1, 1])),
        OracleCheck("graph row neighbor weight", 0.5, float(dense[1, 2])),
        OracleCheck("graph pad self-loop", 1.0, float(dense[0, 0])),
        OracleCheck("graph row sum", 1.0, float(dense[2].sum())),
    ]


def _check_propagation() -> list[OracleCheck]:
    graph = build_item_graph(_tiny_two_item_dataset())
    enc = SequenceEncoder(vocab_size=3, embed_dim=4, max_len=4, num_gnn_layers=1, seed=3).double()
    adj = graph_to_torch(graph, dtype=torch.float64)
    with torch.no_grad():
        out = enc.propagate_graph(adj).numpy()
    base = enc.gnn_base_emb.weight.detach().numpy()
    dense = graph.adjacency.toarray()
    reference = 0.5 * (base + dense @ base)  # one hop, averaged with the base table
    return [OracleCheck(
        "graph propagation one hop (max abs difference)",
        0.0,
        float(np.abs(out - reference).max()),
    )]


def _check_split() -> list[OracleCheck]:
    train, valid, test = chronological_split(list(range(10)))
    contiguous = train + valid + test == list(range(10))
    return [
        OracleCheck("split 10 -> train 8", 8.0, float(len(train))),
        OracleCheck("split 10 -> valid 1", 1.0, float(len(valid))),
        OracleCheck("split 10 -> test 1", 1.0, float(len(test))),
        OracleCheck("split preserves order", 1.0, 1.0 if contiguous else 0.0),
    ]


def run_oracle_checks() -> tuple[list[OracleCheck], float]:
    """Run every oracle check; returns (checks, elapsed seconds)."""
    start = time.perf_counter()
    checks: list[OracleCheck] = []
    for fn in (_check_kl, _check_nll, _check_jsd, _check_infonce,
               _check_metrics, _check_aggregation, _check_graph,
               _check_propagation, _check_split):
        checks.extend(fn())
    return checks, time.perf_counter() - start
