"""Input validation helpers for the public estimator and CLI surfaces."""
from __future__ import annotations

import numpy as np

from .data import DomainDataset
from .exceptions import ConfigError


def check_domain_datasets(X) -> list[DomainDataset]:
    """Validate a collection of domain datasets for training.

    Accepts any iterable of :class:`DomainDataset`; enforces unique domain
    names, internal consistency, and a non-empty training split everywhere.
    """
    if isinstance(X, DomainDataset):
        X = [X]
    datasets = list(X)
    if not datasets:
        raise ConfigError("need at least one domain dataset")
    names = []
    for ds in datasets:
        if not isinstance(ds, DomainDataset):
            raise ConfigError(f"expected DomainDataset, got {type(ds).__name__}")
        ds.validate()
        if not ds.train:
            raise ConfigError(f"{ds.domain_name}: empty training split")
        names.append(ds.domain_name)
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate domain names: {sorted(names)}")
    return datasets


def check_sequences(sequences, vocab_size: int) -> list[list[int]]:
    """Validate raw item sequences for scoring: non-empty, in-vocabulary ints."""
    if not sequences:
        raise ConfigError("no sequences to score")
    if isinstance(sequences[0], (int, np.integer)):
        sequences = [sequences]
    out = []
    for i, seq in enumerate(sequences):
        seq = [int(x) for x in seq]
        if not seq:
            raise ConfigError(f"sequence {i} is empty")
        for item in seq:
            if not 1 <= item < vocab_size:
                raise ConfigError(
                    f"sequence {i}: item {item} outside [1, {vocab_size - 1}]"
                )
        out.append(seq)
    return out


def check_option(name: str, value: str, options: tuple[str, ...]) -> str:
    if value not in options:
        raise ConfigError(f"{name} must be one of {options}, got {value!r}")
    return value
