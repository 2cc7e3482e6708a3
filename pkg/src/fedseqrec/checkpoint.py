"""Checkpoints: named-tensor archives in compressed ``.npz`` form.

Every archive embeds a JSON manifest recording a format version, the shape
and dtype of every stored array, and free-form metadata; loading verifies
the version and the shapes so a stale or truncated archive fails loudly
instead of deserializing into garbage.
"""
from __future__ import annotations

import json

import numpy as np

from .exceptions import ProtocolError

CHECKPOINT_FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a manifest to ``path``."""
    if _MANIFEST_KEY in arrays:
        raise ValueError(f"array name {_MANIFEST_KEY!r} is reserved")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
    }
    payload = {_MANIFEST_KEY: np.array(json.dumps(manifest))}
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read named arrays and metadata, validating the manifest."""
    with np.load(path, allow_pickle=False) as npz:
        if _MANIFEST_KEY not in npz:
            raise ProtocolError(f"{path}: not a checkpoint (missing manifest)")
        manifest = json.loads(str(npz[_MANIFEST_KEY][()]))
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ProtocolError(f"{path}: unsupported checkpoint format version {version!r}")
        arrays = {k: npz[k] for k in npz.files if k != _MANIFEST_KEY}
    for name, shape in manifest["shapes"].items():
        if name not in arrays:
            raise ProtocolError(f"{path}: manifest lists {name!r} but archive lacks it")
        if list(arrays[name].shape) != shape:
            raise ProtocolError(
                f"{path}: {name!r} has shape {list(arrays[name].shape)}, manifest says {shape}"
            )
    return arrays, manifest["meta"]


def save_run_checkpoint(path: str, state, clients) -> None:
    """Persist a federated run: global state plus every client's local modules."""
    arrays: dict[str, np.ndarray] = {}
    if state.shared_params is not None:
        for k, v in state.shared_params.items():
            arrays[f"global/{k}"] = v
    for uid, rep in state.rep_table.items():
        arrays[f"reps/{uid}"] = rep
    for client in clients:
        for component, params in client.local_state().items():
            for k, v in params.items():
                arrays[f"client/{client.client_id}/{component}/{k}"] = v
    meta = {
        "round": int(state.round),
        "clients": [c.client_id for c in clients],
        "has_global": state.shared_params is not None,
    }
    save_arrays(path, arrays, meta)


def load_run_checkpoint(path: str, clients) -> tuple[dict | None, dict[str, np.ndarray], int]:
    """Restore client modules from a checkpoint; returns (global params, rep table, round).

    ``clients`` must be freshly built with the same architecture and domain
    names as the saved run.
    """
    arrays, meta = load_arrays(path)
    saved_ids = set(meta["clients"])
    current_ids = {c.client_id for c in clients}
    if saved_ids != current_ids:
        raise ProtocolError(
            f"{path}: checkpoint clients {sorted(saved_ids)} != current {sorted(current_ids)}"
        )
    global_params = None
    if meta["has_global"]:
        global_params = {
            k[len("global/"):]: v for k, v in arrays.items() if k.startswith("global/")
        }
    rep_table = {k[len("reps/"):]: v for k, v in arrays.items() if k.startswith("reps/")}
    for client in clients:
        prefix = f"client/{client.client_id}/"
        state: dict[str, dict[str, np.ndarray]] = {}
        for k, v in arrays.items():
            if k.startswith(prefix):
                component, name = k[len(prefix):].split("/", 1)
                state.setdefault(component, {})[name] = v
        client.load_local_state(state)
    return global_params, rep_table, int(meta["round"])
