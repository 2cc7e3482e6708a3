"""Federation: aggregation algebra, message hygiene, the round loop, variants."""
import copy
import dataclasses
import json

import numpy as np
import pytest
import torch

from fedseqrec.disentangle import LossWeights
from fedseqrec.exceptions import ConfigError, ProtocolError
from fedseqrec.federation import (
    VARIANTS,
    Client,
    DownMessage,
    ModelConfig,
    MonolithicClient,
    TrainConfig,
    UpMessage,
    aggregate_params,
    aggregate_representations,
    make_client,
    message_to_payload,
    resolve_variant,
    run_federated,
    run_variant,
)


def up(client_id, value, count, users=None):
    params = {"w": np.full((2, 2), float(value)), "b": np.array([float(value)])}
    reps = {u: np.full((3,), float(value)) for u in (users or [])}
    return UpMessage(client_id, params, reps, count)


# ---------------------------------------------------------------------------
# Aggregation algebra
# ---------------------------------------------------------------------------

def test_single_client_aggregation_is_identity():
    msg = up("a", 1.2345678, 17, users=["u1"])
    agg = aggregate_params([msg])
    for name in msg.shared_params:
        assert np.array_equal(agg[name], msg.shared_params[name])
    reps = aggregate_representations([msg])
    assert np.array_equal(reps["u1"], msg.rep_table["u1"])


def test_equal_weights_cancel_symmetric_updates():
    agg = aggregate_params([up("a", +0.75, 10), up("b", -0.75, 10)])
    for arr in agg.values():
        assert np.allclose(arr, 0.0)


def test_sample_count_weighting_one_to_three():
    agg = aggregate_params([up("a", 0.0, 1), up("b", 4.0, 3)])
    for arr in agg.values():
        assert np.allclose(arr, 3.0)


def test_aggregation_is_order_invariant():
    ups = [up("c", 0.3, 7), up("a", -1.7, 3), up("b", 2.9, 11)]
    forward = aggregate_params(ups)
    backward = aggregate_params(list(reversed(ups)))
    for name in forward:
        assert np.array_equal(forward[name], backward[name])


def test_aggregation_rejects_bad_updates():
    with pytest.raises(ProtocolError):
        aggregate_params([])
    with pytest.raises(ProtocolError):
        aggregate_params([up("a", 1, 5), up("a", 2, 5)])  # duplicate ids
    with pytest.raises(ProtocolError):
        aggregate_params([up("a", 1, 0)])  # no samples
    mismatched = up("b", 1, 5)
    mismatched.shared_params = {"w": np.zeros((2, 2))}  # missing "b"
    with pytest.raises(ProtocolError):
        aggregate_params([up("a", 1, 5), mismatched])
    bad_shape = up("b", 1, 5)
    bad_shape.shared_params["w"] = np.zeros((3, 3))
    with pytest.raises(ProtocolError):
        aggregate_params([up("a", 1, 5), bad_shape])


def test_representation_aggregation_reweights_partial_users():
    ups = [
        up("a", 1.0, 1, users=["shared_user", "only_a"]),
        up("b", 3.0, 3, users=["shared_user"]),
    ]
    reps = aggregate_representations(ups)
    # shared_user: (1*1 + 3*3) / 4
    assert np.allclose(reps["shared_user"], 2.5)
    # only_a: weights renormalize over the single reporting client
    assert np.allclose(reps["only_a"], 1.0)


def test_aggregated_dtype_is_preserved():
    a = UpMessage("a", {"w": np.ones((2,), dtype=np.float32)}, {}, 1)
    b = UpMessage("b", {"w": np.zeros((2,), dtype=np.float32)}, {}, 1)
    agg = aggregate_params([a, b])
    assert agg["w"].dtype == np.float32


# ---------------------------------------------------------------------------
# Message hygiene
# ---------------------------------------------------------------------------

def walk_payload(node, found):
    if isinstance(node, dict):
        for key, value in node.items():
            found.add(str(key))
            walk_payload(value, found)
    elif isinstance(node, (list, tuple)):
        for value in node:
            walk_payload(value, found)


def test_up_message_payload_has_no_sequence_fields(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    client = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    msg = client.local_update(DownMessage(None, {}, 0), tiny_train_cfg)
    payload = message_to_payload(msg)
    json.dumps(payload)  # must be JSON-serializable as-is

    keys: set[str] = set()
    walk_payload(payload, keys)
    forbidden = {"items", "sequence", "sequences", "timestamps", "train", "history", "context"}
    assert not (keys & forbidden)

    # no uploaded array literally contains any user's item sequence
    train_seqs = [seq.items for seq in tiny_datasets[0].train.values()]
    arrays = [np.asarray(p["data"]) for p in payload["shared_params"].values()]
    arrays += [np.asarray(p["data"]) for p in payload["rep_table"].values()]
    for seq in train_seqs:
        probe = np.asarray(seq, dtype=np.float64)
        for arr in arrays:
            if arr.size < probe.size:
                continue
            windows = np.lib.stride_tricks.sliding_window_view(arr.ravel(), probe.size)
            assert not np.any(np.all(windows == probe, axis=1)), (
                "raw item sequence found inside an uploaded tensor"
            )


def test_down_message_payload_round_trips_to_json():
    down = DownMessage({"w": np.ones((2, 2))}, {"u": np.zeros(3)}, 4)
    payload = message_to_payload(down)
    decoded = json.loads(json.dumps(payload))
    assert decoded["kind"] == "down" and decoded["round"] == 4
    assert decoded["shared_params"]["w"]["shape"] == [2, 2]


# ---------------------------------------------------------------------------
# Clients and the round loop
# ---------------------------------------------------------------------------

def test_client_is_seed_deterministic(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    a = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    b = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    for comp, params in a.local_state().items():
        for name, arr in params.items():
            assert np.array_equal(arr, b.local_state()[comp][name]), (comp, name)
    # shared and exclusive branches start from different draws
    assert not np.array_equal(
        a.local_state()["shared_encoder"]["item_emb.weight"],
        a.local_state()["exclusive_encoder"]["item_emb.weight"],
    )


def test_representation_table_is_deterministic_and_complete(
    tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    client = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    t1 = client.representation_table()
    t2 = client.representation_table(batch_size=3)
    assert set(t1) == set(tiny_datasets[0].train)
    for uid in t1:
        assert t1[uid].shape == (tiny_model_cfg.max_len, tiny_model_cfg.embed_dim)
        assert t1[uid].dtype == np.float32
        assert np.array_equal(t1[uid], t2[uid])


def test_round_zero_skips_similarity_training(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    """Before any aggregation there is nothing to align to: a round-0 update
    must behave identically whatever beta is configured."""
    def run_one(beta):
        cfg = dataclasses.replace(
            tiny_train_cfg, weights=dataclasses.replace(tiny_train_cfg.weights, beta=beta)
        )
        client = make_client(tiny_datasets[0], tiny_model_cfg, cfg)
        msg = client.local_update(DownMessage(None, {}, 0), cfg)
        return msg.stats["total"]

    assert run_one(0.0) == run_one(5.0)


def test_load_shared_rejects_wrong_architecture(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    client = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    with pytest.raises(ProtocolError):
        client.load_shared({"item_emb.weight": np.zeros((2, 2))})


def run_tiny(datasets, model_cfg, cfg, variant="full"):
    clients, state, history = run_variant(datasets, model_cfg, cfg, variant)
    return clients, state, history


def test_two_identical_runs_produce_identical_history(
    tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    _, _, h1 = run_tiny(tiny_datasets, tiny_model_cfg, tiny_train_cfg)
    _, _, h2 = run_tiny(tiny_datasets, tiny_model_cfg, tiny_train_cfg)
    assert json.dumps(h1, sort_keys=True) == json.dumps(h2, sort_keys=True)


def test_aggregation_round_synchronizes_shared_branch(
    tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    clients, state, _ = run_tiny(tiny_datasets, tiny_model_cfg, tiny_train_cfg)
    assert state.shared_params is not None
    assert set(state.rep_table) == set().union(*(set(d.train) for d in tiny_datasets))
    reference = clients[0].shared_state()
    for client in clients[1:]:
        other = client.shared_state()
        for name in reference:
            assert np.array_equal(reference[name], other[name]), name


def test_local_only_never_exchanges(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    clients, state, _ = run_tiny(tiny_datasets, tiny_model_cfg, tiny_train_cfg, "local_only")
    assert state.shared_params is None and state.rep_table == {}
    a = clients[0].shared_state()["item_emb.weight"]
    b = clients[1].shared_state()["item_emb.weight"]
    assert a.shape != b.shape or not np.array_equal(a, b)


def test_early_stopping_with_flat_validation(tiny_datasets, tiny_model_cfg):
    """With lr=0 nothing improves: training stops after patience stalls."""
    cfg = TrainConfig(
        rounds=10, local_epochs=1, patience=2, batch_size=16, lr=0.0,
        dropout=0.0, negatives_per_eval=10, seed=5,
    )
    _, _, history = run_tiny(tiny_datasets, tiny_model_cfg, cfg)
    # round 0 sets the best; rounds 1 and 2 fail to improve; stop
    assert len(history) == 3


def test_restore_best_rolls_clients_back(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    cfg = dataclasses.replace(tiny_train_cfg, rounds=3, patience=1)
    clients, state, history = run_tiny(tiny_datasets, tiny_model_cfg, cfg)
    best_round = int(np.argmax([rec["avg_valid"]["mrr"] for rec in history]))
    assert state.round == best_round + 1


def test_run_federated_validation_errors(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    with pytest.raises(ConfigError):
        run_federated([], tiny_train_cfg)
    c1 = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    c2 = make_client(tiny_datasets[0], tiny_model_cfg, tiny_train_cfg)
    with pytest.raises(ConfigError):
        run_federated([c1, c2], tiny_train_cfg)  # duplicate client ids


def test_config_validation_errors():
    for kw in (
        dict(rounds=0), dict(local_epochs=0), dict(patience=0), dict(batch_size=0),
        dict(lr=-0.1), dict(dropout=1.0), dict(eval_k=0), dict(negatives_per_eval=0),
    ):
        with pytest.raises(ConfigError):
            dataclasses.replace(TrainConfig(), **kw).validate()
    for kw in (
        dict(embed_dim=0), dict(num_gnn_layers=-1), dict(num_attn_layers=0),
        dict(embed_dim=9, num_heads=2),
    ):
        with pytest.raises(ConfigError):
            dataclasses.replace(ModelConfig(), **kw).validate()


# ---------------------------------------------------------------------------
# Variants
# ---------------------------------------------------------------------------

def test_variant_weight_resolution():
    w = LossWeights(alpha=1.0, beta=2.0, gamma=1.0, lambda_=2.0, tau=0.2)
    assert resolve_variant("full", w).weights == w
    nc = resolve_variant("no_contrast", w)
    assert (nc.weights.lambda_, nc.weights.beta, nc.weights.gamma) == (0.0, 2.0, 1.0)
    nd = resolve_variant("no_disentangle", w)
    assert (nd.weights.beta, nd.weights.gamma, nd.weights.lambda_) == (0.0, 0.0, 0.0)
    assert nd.weights.alpha == 1.0 and not nd.monolithic and nd.federate
    lo = resolve_variant("local_only", w)
    assert lo.weights.beta == 0.0 and not lo.federate
    mono = resolve_variant("fedavg_monolithic", w)
    assert mono.monolithic and mono.federate
    # the caller's weights object is never mutated
    assert w.lambda_ == 2.0 and w.beta == 2.0
    with pytest.raises(ConfigError):
        resolve_variant("nonsense", w)


def test_monolithic_client_averages_everything(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    clients, state, _ = run_tiny(
        tiny_datasets, tiny_model_cfg, tiny_train_cfg, "fedavg_monolithic"
    )
    assert all(isinstance(c, MonolithicClient) for c in clients)
    # every parameter of the model is in the exchanged state
    shared_names = set(clients[0].shared_state())
    local_names = {
        f"{comp}.{name}"
        for comp, params in clients[0].local_state().items()
        for name in params
    }
    assert shared_names == local_names


def test_all_variants_run_one_round(tiny_datasets, tiny_model_cfg, tiny_train_cfg):
    cfg = dataclasses.replace(tiny_train_cfg, rounds=1)
    for variant in VARIANTS:
        clients, _, history = run_tiny(tiny_datasets, tiny_model_cfg, cfg, variant)
        assert len(history) == 1
        record = history[0]
        assert set(record["train"]) == {d.domain_name for d in tiny_datasets}
        assert "mrr" in record["avg_valid"]
        for stats in record["train"].values():
            assert np.isfinite(stats["total"])
