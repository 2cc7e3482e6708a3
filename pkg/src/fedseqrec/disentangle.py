"""Losses that separate a client's shared and exclusive sequence factors.

Three ingredients, combined by :func:`disentanglement_loss`:

* a variational *difference* bound — KL of both posteriors to the standard
  normal plus the joint reconstruction likelihood — that discourages the two
  branches from encoding the same information;
* a Jensen-Shannon *similarity* bound between the shared user vector and the
  federation's aggregated user vector, estimated with a bilinear critic,
  that pulls the shared branch toward what other domains agree on;
* an *exclusive* reconstruction term that forces the exclusive branch to
  stay predictive on its own.

All three are ordinary differentiable torch expressions; how their gradients
are routed to parameter groups is the trainer's concern, with one exception
handled here: when ``detach_negative`` is set, the exclusive user vector is
detached before being used as the critic's negative sample, so the
similarity term trains the shared branch and the critic but never pushes
gradients into the exclusive branch.
"""
from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F
from torch import nn

from .data import PAD
from .encoder import LatentBundle, LatentDist
from .exceptions import ConfigError


@dataclasses.dataclass
class LossWeights:
    """Scales of the training objective's terms.

    ``alpha`` weights the difference bound, ``beta`` the similarity bound,
    ``gamma`` the exclusive reconstruction, ``lambda_`` the contrastive
    term, and ``tau`` is the contrastive temperature.
    """

    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 1.0
    lambda_: float = 2.0
    tau: float = 0.2

    def validate(self) -> None:
        for field in ("alpha", "beta", "gamma", "lambda_"):
            if getattr(self, field) < 0:
                raise ConfigError(f"loss weight {field} must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def real_position_mask(items: torch.Tensor) -> torch.Tensor:
    """Boolean mask of non-padding positions in a (B, T) item batch."""
    return items != PAD


def kl_to_standard_normal(dist: LatentDist, mask: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over real positions.

    Per position the closed form is ``0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)``.
    """
    if not mask.any():
        raise ValueError("empty batch: no real positions under the mask")
    per_dim = 0.5 * (dist.mu ** 2 + dist.sigma ** 2 - 1.0 - 2.0 * torch.log(dist.sigma))
    per_pos = per_dim.sum(dim=-1)
    return per_pos[mask].mean()


def next_item_nll(logits: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    """Autoregressive negative log-likelihood of a left-padded batch.

    The item at position t is predicted from the logits at position t-1;
    positions where either side is padding are excluded. Averaged over the
    contributing positions.
    """
    b, t, _ = logits.shape
    targets = items[:, 1:]
    prev_logits = logits[:, :-1]
    mask = (targets != PAD) & (items[:, :-1] != PAD)
    if not mask.any():
        raise ValueError("empty batch: no adjacent real-item pairs to predict")
    flat = F.cross_entropy(
        prev_logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).view(b, t - 1)
    return flat[mask].mean()


class Predictor(nn.Module):
    """Position-wise next-item head applied to a latent sequence.

    Produces a hidden state per position; logits are inner products against
    the item embedding table of the exclusive branch (weight tying), so the
    table is owned elsewhere and passed in at call time.
    """

    def __init__(self, embed_dim: int, seed: int = 0):
        super().__init__()
        self.fc_in = nn.Linear(embed_dim, embed_dim)
        self.fc_out = nn.Linear(embed_dim, embed_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
                else:
                    p.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.gelu(self.fc_in(z)))


def reconstruction_nll(
    z: torch.Tensor,
    items: torch.Tensor,
    predictor: Predictor,
    item_table: torch.Tensor,
) -> torch.Tensor:
    """Sequence NLL of ``items`` under the predictor applied to latents ``z``."""
    logits = predictor(z) @ item_table.t()
    return next_item_nll(logits, items)


class Discriminator(nn.Module):
    """Bilinear critic ``T(a, b) = a^T W b + bias`` used by the similarity bound."""

    def __init__(self, embed_dim: int, seed: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(embed_dim, embed_dim))
        self.bias = nn.Parameter(torch.zeros(1))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.weight.copy_(
                torch.randn(embed_dim, embed_dim, generator=gen) / math.sqrt(embed_dim)
            )

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bi,ij,bj->b", a, self.weight, b) + self.bias


def jsd_similarity(
    z_shared_user: torch.Tensor,
    z_global_user: torch.Tensor,
    z_negative_user: torch.Tensor,
    disc: Discriminator,
) -> torch.Tensor:
    """Jensen-Shannon lower bound on the shared/global dependence.

    ``mean(-softplus(-T(pos)))`` over matched (shared, global) pairs minus
    ``mean(softplus(T(neg)))`` over (negative, global) pairs. With a blank
    critic (W = 0, bias = 0) both terms are log 2, giving exactly -2 log 2;
    the bound can only exceed that when the critic separates the pairings.
    Training *maximizes* this value, so the loss contribution is its negation.
    """
    pos = disc(z_shared_user, z_global_user)
    neg = disc(z_negative_user, z_global_user)
    return (-F.softplus(-pos)).mean() - F.softplus(neg).mean()


@dataclasses.dataclass
class LossBreakdown:
    """Individual objective terms, before weighting.

    ``total`` is reconstructed exactly as
    ``alpha * (kl_shared + kl_exclusive + joint_nll) - beta * jsd_bound
    + gamma * exclusive_nll``.
    """

    kl_shared: torch.Tensor
    kl_exclusive: torch.Tensor
    joint_nll: torch.Tensor
    jsd_bound: torch.Tensor
    exclusive_nll: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            name: float(getattr(self, name).detach())
            for name in ("kl_shared", "kl_exclusive", "joint_nll", "jsd_bound",
                         "exclusive_nll", "total")
        }


def disentanglement_loss(
    bundle: LatentBundle,
    dist_shared: LatentDist,
    dist_exclusive: LatentDist,
    items: torch.Tensor,
    z_global: torch.Tensor,
    disc: Discriminator,
    predictor: Predictor,
    item_table: torch.Tensor,
    weights: LossWeights,
    detach_negative: bool = True,
    exclusive_recon_branch: str = "exclusive",
) -> LossBreakdown:
    """Weighted disentanglement objective for one batch.

    ``z_global`` holds the aggregated per-user latents for the batch rows
    (zeros before the first aggregation round; callers then run with
    ``weights.beta == 0`` since there is nothing to align to yet).

    ``exclusive_recon_branch`` selects which latent carries the standalone
    reconstruction term: ``"exclusive"`` (default) keeps the exclusive
    branch self-sufficient; ``"shared"`` is the alternative reading where
    the shared latent is scored instead.
    """
    if exclusive_recon_branch not in ("exclusive", "shared"):
        raise ConfigError(f"unknown exclusive_recon_branch {exclusive_recon_branch!r}")
    mask = real_position_mask(items)
    kl_s = kl_to_standard_normal(dist_shared, mask)
    kl_e = kl_to_standard_normal(dist_exclusive, mask)
    joint_nll = reconstruction_nll(
        bundle.z_shared + bundle.z_exclusive, items, predictor, item_table
    )
    z_neg = bundle.user_vec.detach() if detach_negative else bundle.user_vec
    jsd = jsd_similarity(bundle.z_shared[:, -1, :], z_global[:, -1, :], z_neg, disc)
    solo = bundle.z_exclusive if exclusive_recon_branch == "exclusive" else bundle.z_shared
    excl_nll = reconstruction_nll(solo, items, predictor, item_table)
    total = (
        weights.alpha * (kl_s + kl_e + joint_nll)
        - weights.beta * jsd
        + weights.gamma * excl_nll
    )
    return LossBreakdown(
        kl_shared=kl_s,
        kl_exclusive=kl_e,
        joint_nll=joint_nll,
        jsd_bound=jsd,
        exclusive_nll=excl_nll,
        total=total,
    )
