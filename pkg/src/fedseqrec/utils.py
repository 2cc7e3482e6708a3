"""Small shared helpers: deterministic seed derivation, padding, dropout."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(base: int, *tags) -> int:
    """Return a stable child seed for ``(base, *tags)``.

    Tags may be ints or strings; strings are hashed with crc32 so the result
    does not depend on the process hash seed. The same arguments always give
    the same child seed, and distinct tag paths give (overwhelmingly likely)
    distinct streams.
    """
    words = [int(base) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf8")))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def pad_left(items: list[int], length: int, pad: int = 0) -> list[int]:
    """Left-pad (or left-truncate) ``items`` to exactly ``length`` entries.

    Keeping the most recent items on the right means the final position of
    every padded sequence holds the newest interaction.
    """
    if len(items) > length:
        items = items[-length:]
    return [pad] * (length - len(items)) + list(items)


def pad_batch(sequences, length: int, pad: int = 0) -> np.ndarray:
    """Stack variable-length item lists into an int64 array of shape (N, length)."""
    out = np.full((len(sequences), length), pad, dtype=np.int64)
    for row, seq in enumerate(sequences):
        tail = seq[-length:] if len(seq) > length else seq
        if tail:
            out[row, length - len(tail):] = tail
    return out


def seeded_dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator.

    Built on ``torch.rand`` instead of ``torch.nn.functional.dropout`` so the
    mask comes from a caller-owned stream rather than global RNG state.
    """
    if not training or p <= 0.0:
        return x
    if gen is None:
        raise ValueError("training-mode dropout requires an explicit generator")
    keep = 1.0 - p
    mask = (torch.rand(x.shape, generator=gen, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep
