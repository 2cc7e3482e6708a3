"""Checkpoint archives: manifest validation and full-run round trips."""
import dataclasses

import numpy as np
import pytest

from fedseqrec.checkpoint import (
    load_arrays,
    load_run_checkpoint,
    save_arrays,
    save_run_checkpoint,
)
from fedseqrec.exceptions import ProtocolError
from fedseqrec.federation import DownMessage, make_client, run_variant


def test_array_round_trip(tmp_path):
    path = str(tmp_path / "arrays.npz")
    arrays = {
        "weights": np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32),
        "counts": np.arange(7, dtype=np.int64),
    }
    save_arrays(path, arrays, meta={"round": 3, "note": "x"})
    loaded, meta = load_arrays(path)
    assert meta == {"round": 3, "note": "x"}
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])


def test_reserved_name_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_arrays(str(tmp_path / "x.npz"), {"__manifest__": np.zeros(1)})


def test_non_checkpoint_file_rejected(tmp_path):
    path = str(tmp_path / "plain.npz")
    np.savez(path, a=np.zeros(2))
    with pytest.raises(ProtocolError):
        load_arrays(path)


def test_wrong_format_version_rejected(tmp_path, monkeypatch):
    import fedseqrec.checkpoint as ckpt

    path = str(tmp_path / "old.npz")
    monkeypatch.setattr(ckpt, "CHECKPOINT_FORMAT_VERSION", 0)
    save_arrays(path, {"a": np.zeros(2)})
    monkeypatch.undo()
    with pytest.raises(ProtocolError):
        load_arrays(path)


def test_run_checkpoint_restores_clients_bitwise(
    tmp_path, tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    cfg = dataclasses.replace(tiny_train_cfg, rounds=1)
    clients, state, _ = run_variant(tiny_datasets, tiny_model_cfg, cfg, "full")
    path = str(tmp_path / "run.npz")
    save_run_checkpoint(path, state, clients)
    saved = [c.local_state() for c in clients]

    # drift the clients, then restore
    for client in clients:
        client.local_update(DownMessage(None, {}, 1), cfg)
    restored_global, rep_table, rnd = load_run_checkpoint(path, clients)

    assert rnd == state.round
    assert set(rep_table) == set(state.rep_table)
    for uid in rep_table:
        assert np.array_equal(rep_table[uid], state.rep_table[uid])
    for name, arr in state.shared_params.items():
        assert np.array_equal(restored_global[name], arr)
    for client, before in zip(clients, saved):
        after = client.local_state()
        for comp in before:
            for name in before[comp]:
                assert np.array_equal(before[comp][name], after[comp][name]), (comp, name)


def test_run_checkpoint_rejects_mismatched_clients(
    tmp_path, tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    cfg = dataclasses.replace(tiny_train_cfg, rounds=1)
    clients, state, _ = run_variant(tiny_datasets, tiny_model_cfg, cfg, "full")
    path = str(tmp_path / "run.npz")
    save_run_checkpoint(path, state, clients)
    lonely = [make_client(tiny_datasets[0], tiny_model_cfg, cfg)]
    with pytest.raises(ProtocolError):
        load_run_checkpoint(path, lonely)


def test_run_checkpoint_without_global_state(
    tmp_path, tiny_datasets, tiny_model_cfg, tiny_train_cfg
):
    cfg = dataclasses.replace(tiny_train_cfg, rounds=1)
    clients, state, _ = run_variant(tiny_datasets, tiny_model_cfg, cfg, "local_only")
    assert state.shared_params is None
    path = str(tmp_path / "local.npz")
    save_run_checkpoint(path, state, clients)
    restored_global, rep_table, _ = load_run_checkpoint(path, clients)
    assert restored_global is None and rep_table == {}
