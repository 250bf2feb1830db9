"""The full contour-guided refinement network."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .contours import N_POINTS, descriptor_matrix
from .encoder import EncoderConfig, HRNetEncoder
from .errors import ConfigError
from .heads import CoarseHead, DualHeads, PredictionBundle, upsample_aligned
from .refinement import (
    AttentionTrace,
    ContourCrossAttention,
    PyramidFusion,
    QueryEmbedding,
    unflatten,
)

ABLATIONS = (
    "no_boundary_head",
    "no_coarse_head",
    "no_contour_queries",
    "no_pyramid_fusion",
    "no_teacher_forcing",
)


def normalize_ablations(flags) -> frozenset:
    out = set()
    for f in flags or ():
        name = str(f).strip().replace("-", "_")
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {f!r}; choose from {', '.join(ABLATIONS)}")
        out.add(name)
    return frozenset(out)


def mask_hash(mask) -> str:
    arr = np.ascontiguousarray(np.asarray(mask, dtype=np.int64))
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 3  # foreground classes K
    image_size: tuple = (256, 256)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 128
    n_base_queries: int = 4
    n_contour_points: int = N_POINTS
    head_hidden: Optional[int] = None
    ablations: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        object.__setattr__(self, "ablations", normalize_ablations(self.ablations))
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.embed_dim < 1 or self.n_base_queries < 0:
            raise ConfigError("embed_dim must be positive and n_base_queries non-negative")
        if "no_contour_queries" in self.ablations and self.n_base_queries == 0:
            raise ConfigError("no_contour_queries needs at least one base query")
        self.encoder.check_input(*self.image_size)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            n_classes=3,
            image_size=(64, 64),
            encoder=EncoderConfig(branch_channels=(16, 32, 64), branch_strides=(4, 8, 16), n_stages=2),
            embed_dim=64,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["encoder"]["branch_channels"] = list(self.encoder.branch_channels)
        d["encoder"]["branch_strides"] = list(self.encoder.branch_strides)
        d["ablations"] = sorted(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["ablations"] = frozenset(d.get("ablations", ()))
        return cls(**d)


class CGQRNet(nn.Module):
    """Encoder -> coarse head -> contours -> queries -> fused-token attention -> dual heads.

    ``contour_hooks`` receive ``(source, masks)`` every time descriptors are
    computed, where ``source`` is ``"gt"``, ``"coarse"`` or ``"refined"``.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        ab = cfg.ablations
        enc = cfg.encoder
        self.encoder = HRNetEncoder(enc)
        # every submodule is built whole and ablated parts are dropped afterwards, so
        # variants sharing a seed start from identical values for shared parameters
        coarse = CoarseHead(enc.branch_channels[2], cfg.n_classes)
        self.coarse_head = None if "no_coarse_head" in ab else coarse
        self.queries = QueryEmbedding(
            cfg.embed_dim, cfg.n_base_queries, use_contour="no_contour_queries" not in ab
        )
        self.fusion = PyramidFusion(
            enc.branch_channels, cfg.embed_dim, use_all_branches="no_pyramid_fusion" not in ab
        )
        self.attention = ContourCrossAttention(cfg.embed_dim)
        self.heads = DualHeads(
            cfg.embed_dim, cfg.n_classes, cfg.head_hidden, boundary="no_boundary_head" not in ab
        )
        self.contour_hooks: list[Callable] = []

    @property
    def uses_contours(self) -> bool:
        return self.queries.use_contour

    def descriptors(self, masks, source: str) -> torch.Tensor:
        masks = masks.detach().cpu().numpy() if torch.is_tensor(masks) else np.asarray(masks)
        for hook in self.contour_hooks:
            hook(source, masks)
        mats = [descriptor_matrix(m, self.cfg.n_classes, self.cfg.n_contour_points) for m in masks]
        return torch.from_numpy(np.stack(mats)).to(torch.get_default_dtype())

    def coarse_mask(self, coarse_probs: torch.Tensor) -> torch.Tensor:
        """Argmax of the coarse probabilities after grid-aligned bilinear upsampling to input size."""
        up = upsample_aligned(coarse_probs.detach(), self.cfg.image_size)
        return up.argmax(dim=1)

    def _refine_and_predict(self, tokens, bank):
        refined, trace = self.attention(tokens, bank)
        z_r, s_r, z_b, b = self.heads(unflatten(refined), self.cfg.image_size)
        return bank, trace, z_r, s_r, z_b, b

    def forward(self, images: torch.Tensor, gt_masks: Optional[torch.Tensor] = None,
                teacher_forcing: bool = False):
        if images.dim() == 2:
            images = images[None, None]
        elif images.dim() == 3:
            images = images[:, None]
        b = images.shape[0]
        feats = self.encoder(images)
        z_c = s_c = None
        if self.coarse_head is not None:
            z_c, s_c = self.coarse_head(feats.f3)
        tokens = self.fusion(feats)

        descriptors = None
        if self.uses_contours:
            if teacher_forcing:
                if gt_masks is None:
                    raise ConfigError("teacher forcing needs ground-truth masks")
                descriptors = self.descriptors(gt_masks, "gt")
            elif s_c is not None:
                descriptors = self.descriptors(self.coarse_mask(s_c), "coarse")
            else:
                # no coarse head: a base-query-only pass supplies the structural hypothesis
                first = self._refine_and_predict(tokens, self.queries.base_only(b))
                descriptors = self.descriptors(first[3].detach().argmax(dim=1), "refined")
            descriptors = descriptors.to(tokens.tokens.dtype)

        bank = self.queries(descriptors, batch_size=b)
        bank, trace, z_r, s_r, z_b, bprob = self._refine_and_predict(tokens, bank)
        bundle = PredictionBundle(
            refined_logits=z_r, refined_probs=s_r,
            coarse_logits=z_c, coarse_probs=s_c,
            boundary_logits=z_b, boundary_probs=bprob,
        )
        self.last_query_bank = bank
        return bundle, trace

    @torch.no_grad()
    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            bundle, _ = self(images)
        finally:
            self.train(was_training)
        return bundle.refined_probs

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict_proba(images).argmax(dim=1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
