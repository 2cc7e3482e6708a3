"""Sequence-level contrastive regularization for the exclusive branch.

A second view of each training sequence is made by shuffling the order of
its real (non-padding) items; the multiset of items is unchanged, so the two
views should describe the same user. A symmetric InfoNCE loss on the
user-level latents of original/augmented pairs rewards encoders that agree
across views and separate different users.
"""
from __future__ import annotations

import dataclasses
import warnings

import torch
import torch.nn.functional as F

from .data import PAD


@dataclasses.dataclass
class ContrastiveBatch:
    """Paired user-level vectors: ``anchors[i]`` and ``positives[i]`` are two
    views of the same user; everything else in the batch is a negative."""

    anchors: torch.Tensor
    positives: torch.Tensor

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise ValueError(
                f"anchor shape {tuple(self.anchors.shape)} != "
                f"positive shape {tuple(self.positives.shape)}"
            )


def augment_shuffle(items: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Permute the real items of each row, leaving padding in place.

    Left-padded input stays left-padded: only the non-pad suffix of each row
    is shuffled. Rows with fewer than two real items are returned unchanged.
    """
    out = items.clone()
    t = items.shape[1]
    for row in range(items.shape[0]):
        n_real = int((items[row] != PAD).sum())
        if n_real >= 2:
            perm = torch.randperm(n_real, generator=gen)
            out[row, t - n_real:] = items[row, t - n_real:][perm]
    return out


def infonce_loss(batch: ContrastiveBatch, tau: float = 0.5) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities at temperature ``tau``.

    For each of the 2N directed instances the positive is the paired view
    and the negatives are the 2(N-1) vectors belonging to other users; the
    similarity of an instance with itself is excluded. With a single pair
    there are no negatives and the loss is exactly zero. Zero-norm vectors
    are treated as having similarity zero to everything (with a warning).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = batch.anchors.shape[0]
    z = torch.cat([batch.anchors, batch.positives], dim=0)  # (2N, d)
    norms = z.norm(dim=1, keepdim=True)
    zero_rows = int((norms.squeeze(1) == 0).sum())
    if zero_rows:
        warnings.warn(f"infonce_loss: {zero_rows} zero-norm vector(s) treated as similarity 0")
    unit = torch.where(norms > 0, z / norms.clamp_min(torch.finfo(z.dtype).tiny), torch.zeros_like(z))
    sim = unit @ unit.t() / tau  # (2N, 2N)

    two_n = 2 * n
    idx = torch.arange(two_n)
    partner = (idx + n) % two_n
    pos = sim[idx, partner]
    # log-sum-exp over everything except self
    masked = sim.masked_fill(torch.eye(two_n, dtype=torch.bool), float("-inf"))
    denom = torch.logsumexp(masked, dim=1)
    if n == 1:
        # single pair: denominator is just the positive, loss is identically 0
        return (pos - pos).sum()
    return (denom - pos).mean()
