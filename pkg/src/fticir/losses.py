"""Training objectives: contrastive alignment, orthogonality, caption tri-regularizer.

All losses consume embeddings, never raw images or text, so they are easy to
check against closed-form oracles. Cosine similarity treats zero-norm vectors
as having similarity 0 everywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from . import config as configmod
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class LossWeights:
    """Scalar knobs of the total objective."""

    tau: float = 0.2
    lambda_reg: float = 1.4

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("loss.tau must be positive")
        if self.lambda_reg < 0:
            raise ConfigError("loss.lambda_reg must be non-negative")

    @classmethod
    def from_flat(cls, cfg: dict[str, str]) -> "LossWeights":
        return cls(
            tau=configmod.get_float(cfg, "loss.tau"),
            lambda_reg=configmod.get_float(cfg, "loss.lambda_reg"),
        )

    def to_flat(self) -> dict[str, str]:
        return {"loss.tau": str(self.tau), "loss.lambda_reg": str(self.lambda_reg)}


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(len(a), len(b)) matrix of row cosines; zero-norm rows give 0."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise InputError("pairwise_cosine expects (Na, d) and (Nb, d)")
    dots = a @ b.T
    denom = a.norm(dim=1).unsqueeze(1) * b.norm(dim=1).unsqueeze(0)
    zeros = torch.zeros((), dtype=a.dtype, device=a.device)
    return torch.where(denom > 0, dots / denom, zeros)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of two vectors with the zero-norm-gives-0 convention."""
    if a.dim() != 1 or b.dim() != 1 or a.shape != b.shape:
        raise InputError("cosine expects two equal-length vectors")
    denom = a.norm() * b.norm()
    if denom.item() == 0.0:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return (a @ b) / denom


def _drop_diagonal(mat: torch.Tensor) -> torch.Tensor:
    """Remove the diagonal of a square matrix, giving shape (B, B-1)."""
    b = mat.shape[0]
    return mat.flatten()[:-1].view(b - 1, b + 1)[:, 1:].reshape(b, b - 1)


def contrastive_loss(
    image_embeds: torch.Tensor, text_embeds: torch.Tensor, tau: float
) -> torch.Tensor:
    """Symmetric in-batch contrastive loss with intra-modal negatives.

    For pair i the image-anchored term contrasts cos(v_i, t_i) against v_i's
    similarity to every text plus t_i's similarity to the other texts; the
    text-anchored term mirrors this with the roles swapped. The intra-modal
    sums push same-modality embeddings apart. A batch of one has no negatives
    and yields exactly zero.
    """
    if tau <= 0:
        raise ConfigError("contrastive temperature must be positive")
    if image_embeds.shape != text_embeds.shape or image_embeds.dim() != 2:
        raise InputError("contrastive_loss expects matching (B, d) matrices")
    if image_embeds.shape[0] < 1:
        raise InputError("contrastive_loss needs at least one pair")
    cross = pairwise_cosine(image_embeds, text_embeds) / tau   # [i, j] = cos(v_i, t_j)/tau
    text_intra = pairwise_cosine(text_embeds, text_embeds) / tau
    image_intra = pairwise_cosine(image_embeds, image_embeds) / tau
    diag = cross.diagonal()
    image_anchor_rows = torch.cat([cross, _drop_diagonal(text_intra)], dim=1)
    text_anchor_rows = torch.cat([cross.T, _drop_diagonal(image_intra)], dim=1)
    term_image = diag - torch.logsumexp(image_anchor_rows, dim=1)
    term_text = diag - torch.logsumexp(text_anchor_rows, dim=1)
    return -(term_image + term_text).mean()


def orthogonal_loss(rows: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance of the row Gram matrix from identity.

    Rows are used as-is (no normalization), so the loss also penalizes row
    norms away from 1; scaling the input changes the value by design.
    """
    if rows.dim() != 2:
        raise InputError("orthogonal_loss expects a (k, d) matrix")
    gram = rows @ rows.T
    eye = torch.eye(rows.shape[0], dtype=rows.dtype, device=rows.device)
    return ((gram - eye) ** 2).sum()


def triwise_loss(
    base: torch.Tensor,
    subject_swapped: Optional[torch.Tensor],
    attributes_swapped: Optional[torch.Tensor],
    both_swapped: Optional[torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Caption regularizer: cosine distances of swapped templates to the base.

    Returns (subject_term, attribute_term, whole_term, total), each term
    being 1 - cos(base, variant) in [0, 2]. A variant passed as None (its
    token kind is ablated) contributes zero.
    """
    zero = torch.zeros((), dtype=base.dtype, device=base.device)

    def term(variant: Optional[torch.Tensor]) -> torch.Tensor:
        if variant is None:
            return zero
        return 1.0 - cosine(base, variant)

    subject_term = term(subject_swapped)
    attribute_term = term(attributes_swapped)
    whole_term = term(both_swapped)
    return subject_term, attribute_term, whole_term, (
        subject_term + attribute_term + whole_term
    )


def total_loss(
    similarity: torch.Tensor, orthogonality: torch.Tensor,
    tri_regularizer: torch.Tensor, weights: LossWeights,
) -> torch.Tensor:
    """Weighted sum of the three objectives."""
    return similarity + orthogonality + weights.lambda_reg * tri_regularizer
