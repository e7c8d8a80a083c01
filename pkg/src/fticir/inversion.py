"""Textual inversion of an image into subject and attribute pseudo tokens.

The network maps frozen backbone features to pseudo-token vectors in the
text-embedding space: the global image vector becomes one subject token, and
a bank of learnable queries attends over the patch features to produce local
attribute candidates. Candidates are ranked by cosine relevance against the
global vector, pruned to the top-k, thresholded, and the survivors are mapped
row-wise into attribute tokens. Only this module's parameters (and the query
bank) ever train; the backbone stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import config as configmod
from .backbone import ImageFeatures
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class InversionConfig:
    """Shapes and hyperparameters of the inversion network."""

    d_embed: int
    d_patch: int
    d_token: int
    n_attrs: int = 24
    layers: int = 3
    heads: int = 1
    hidden_mult: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_attrs < 1:
            raise ConfigError("inversion.n_attrs must be >= 1")
        if self.layers < 0:
            raise ConfigError("inversion.layers must be >= 0")
        if self.heads < 1 or self.d_patch % self.heads:
            raise ConfigError("inversion.heads must divide backbone.d_patch")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("inversion.dropout must be in [0, 1)")

    @classmethod
    def from_flat(cls, cfg: dict[str, str], backbone_cfg) -> "InversionConfig":
        return cls(
            d_embed=backbone_cfg.d_embed,
            d_patch=backbone_cfg.d_patch,
            d_token=backbone_cfg.d_token,
            n_attrs=configmod.get_int(cfg, "inversion.n_attrs"),
            layers=configmod.get_int(cfg, "inversion.layers"),
            heads=configmod.get_int(cfg, "inversion.heads"),
            hidden_mult=configmod.get_int(cfg, "inversion.hidden_mult"),
            dropout=configmod.get_float(cfg, "inversion.dropout"),
        )

    def to_flat(self) -> dict[str, str]:
        return {
            "inversion.n_attrs": str(self.n_attrs),
            "inversion.layers": str(self.layers),
            "inversion.heads": str(self.heads),
            "inversion.hidden_mult": str(self.hidden_mult),
            "inversion.dropout": str(self.dropout),
        }


@dataclass(frozen=True)
class FilterConfig:
    """Top-k plus threshold pruning of attribute candidates."""

    k: int = 12
    epsilon: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("filter.k must be >= 1")
        if not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError("filter.epsilon must lie in [-1, 1]")

    def validate_for(self, n_attrs: int) -> "FilterConfig":
        if self.k > n_attrs:
            raise ConfigError(
                f"filter.k={self.k} exceeds the {n_attrs} attribute candidates"
            )
        return self

    @classmethod
    def from_flat(cls, cfg: dict[str, str]) -> "FilterConfig":
        return cls(
            k=configmod.get_int(cfg, "filter.k"),
            epsilon=configmod.get_float(cfg, "filter.epsilon"),
        )

    def to_flat(self) -> dict[str, str]:
        return {"filter.k": str(self.k), "filter.epsilon": str(self.epsilon)}


@dataclass
class PseudoTokens:
    """Inversion output for one image.

    ``subject`` is the subject pseudo token, ``attributes`` the retained
    attribute tokens (one per surviving candidate). The intermediate
    selection state is kept for inspection and tests: per-candidate cosine
    relevances, the top-k candidate features, and the post-threshold rows.
    """

    subject: torch.Tensor            # (d_token,)
    attributes: torch.Tensor         # (r, d_token)
    sims: torch.Tensor               # (n_attrs,)
    topk_features: torch.Tensor      # (k, d_embed)
    retained_features: torch.Tensor  # (r, d_embed)
    topk_indices: torch.Tensor       # (k,) long
    retained_indices: torch.Tensor   # (r,) long

    @property
    def num_attributes(self) -> int:
        return int(self.attributes.shape[0])


def cosine_to_anchor(rows: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    """Cosine of each row against an anchor vector; zero norms give 0."""
    if rows.dim() != 2 or anchor.dim() != 1:
        raise InputError("expected a 2-D row matrix and a 1-D anchor")
    dots = rows @ anchor
    denom = rows.norm(dim=1) * anchor.norm()
    zeros = torch.zeros((), dtype=rows.dtype, device=rows.device)
    return torch.where(denom > 0, dots / denom, zeros)


def filter_attributes(
    local_feats: torch.Tensor,
    global_embed: torch.Tensor,
    filter_cfg: FilterConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Select attribute candidates by relevance to the global embedding.

    Ranks the n candidate rows by cosine against the global vector, keeps the
    top-k (ties broken by ascending row index), then drops rows below the
    epsilon threshold. If every top-k row falls below threshold the single
    most relevant row is kept, so at least one attribute always survives.

    Returns (sims, topk_indices, retained_indices); index tensors are ordered
    by descending relevance. Selection happens on detached values, gradients
    flow through the gathered rows only.
    """
    n = local_feats.shape[0]
    filter_cfg.validate_for(n)
    sims = cosine_to_anchor(local_feats, global_embed)
    order = torch.sort(sims.detach(), descending=True, stable=True).indices
    topk_indices = order[: filter_cfg.k]
    keep = sims.detach()[topk_indices] >= filter_cfg.epsilon
    retained_indices = topk_indices[keep]
    if retained_indices.numel() == 0:
        retained_indices = topk_indices[:1]
    return sims, topk_indices, retained_indices


class Mlp(nn.Module):
    """Three linear layers with GELU activations and dropout in between."""

    def __init__(self, d_in: int, d_out: int, hidden_mult: int = 4,
                 dropout: float = 0.1):
        super().__init__()
        hidden = hidden_mult * d_in
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, d_out),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class InversionNetwork(nn.Module):
    """Trainable mapping from frozen image features to pseudo tokens.

    Components: a subject MLP over the global embedding; a learnable
    attribute query bank prepended to the patch rows and run through a small
    transformer stack (no positional encodings are added here, so the query
    outputs depend only on the set of patches); a linear projection of the
    query outputs into the shared embedding space; and an attribute MLP
    applied row-wise to the retained candidates.
    """

    def __init__(self, config: InversionConfig,
                 dtype: torch.dtype = torch.float32,
                 seed: int | None = None):
        super().__init__()
        self.config = config
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self._build(config)
        else:
            self._build(config)
        self.dtype = dtype
        self.to(dtype)

    def _build(self, cfg: InversionConfig):
        self.subject_mapper = Mlp(cfg.d_embed, cfg.d_token, cfg.hidden_mult,
                                  cfg.dropout)
        self.query_bank = nn.Parameter(torch.randn(cfg.n_attrs, cfg.d_patch) * 0.02)
        self.attr_blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.d_patch, nhead=cfg.heads,
                dim_feedforward=cfg.hidden_mult * cfg.d_patch,
                dropout=cfg.dropout, activation="gelu", batch_first=True,
            )
            for _ in range(cfg.layers)
        )
        self.attr_proj = nn.Linear(cfg.d_patch, cfg.d_embed)
        self.attribute_mapper = Mlp(cfg.d_embed, cfg.d_token, cfg.hidden_mult,
                                    cfg.dropout)

    def map_subject(self, global_embed: torch.Tensor) -> torch.Tensor:
        if global_embed.shape[-1] != self.config.d_embed:
            raise InputError(
                f"global embedding has dim {global_embed.shape[-1]}, "
                f"expected {self.config.d_embed}"
            )
        return self.subject_mapper(global_embed.to(self.dtype))

    def extract_local_attributes(self, patches: torch.Tensor) -> torch.Tensor:
        """Produce n local attribute candidates in the embedding space.

        The query bank rows are concatenated before the patch rows; after the
        transformer stack only the query positions are read out and projected.
        With zero layers this reduces to projecting the bank directly.
        """
        if patches.dim() != 2 or patches.shape[1] != self.config.d_patch:
            raise InputError(
                f"patches must be (m, {self.config.d_patch}), got {tuple(patches.shape)}"
            )
        n = self.config.n_attrs
        h = torch.cat([self.query_bank, patches.to(self.query_bank.dtype)], dim=0)
        h = h.unsqueeze(0)
        for block in self.attr_blocks:
            h = block(h)
        return self.attr_proj(h.squeeze(0)[:n])

    def map_attributes(self, retained_features: torch.Tensor) -> torch.Tensor:
        if retained_features.dim() != 2:
            raise InputError("retained features must be a 2-D matrix")
        return self.attribute_mapper(retained_features)

    def invert(self, features: ImageFeatures,
               filter_cfg: FilterConfig) -> PseudoTokens:
        """Full image-to-pseudo-token pipeline for one image."""
        subject = self.map_subject(features.global_embed)
        local = self.extract_local_attributes(features.patches)
        sims, topk_idx, retained_idx = filter_attributes(
            local, features.global_embed.to(local.dtype), filter_cfg
        )
        topk_features = local[topk_idx]
        retained_features = local[retained_idx]
        attributes = self.map_attributes(retained_features)
        return PseudoTokens(
            subject=subject,
            attributes=attributes,
            sims=sims,
            topk_features=topk_features,
            retained_features=retained_features,
            topk_indices=topk_idx,
            retained_indices=retained_idx,
        )
