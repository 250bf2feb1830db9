"""Coarse head, region/boundary heads and the training losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass
class PredictionBundle:
    refined_logits: torch.Tensor  # (B, K+1, H0, W0)
    refined_probs: torch.Tensor
    coarse_logits: Optional[torch.Tensor] = None  # (B, K+1, H0/s3, W0/s3)
    coarse_probs: Optional[torch.Tensor] = None
    boundary_logits: Optional[torch.Tensor] = None  # (B, H0, W0)
    boundary_probs: Optional[torch.Tensor] = None


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


@dataclass
class LossReport:
    l_seg: torch.Tensor
    l_boundary: torch.Tensor
    l_coarse: torch.Tensor
    total: torch.Tensor
    lam: float
    mu_aux: float

    def record(self, **extra) -> dict:
        out = dict(extra)
        out.update(
            l_seg=_scalar(self.l_seg),
            l_boundary=_scalar(self.l_boundary),
            l_coarse=_scalar(self.l_coarse),
            total=_scalar(self.total),
        )
        out["lambda"] = self.lam
        out["mu_aux"] = self.mu_aux
        return out


class CoarseHead(nn.Module):
    """1x1 convolution on the deepest branch followed by a class softmax."""

    def __init__(self, in_channels: int, n_classes: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, n_classes + 1, 1)

    def forward(self, f3: torch.Tensor):
        if f3.shape[-3] != self.in_channels:
            raise ShapeError(f"coarse head expects {self.in_channels} channels, got {f3.shape[-3]}")
        logits = self.conv(f3)
        return logits, torch.softmax(logits, dim=-3)


def _head(dim: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(dim, hidden, 3, padding=1),
        nn.ReLU(inplace=False),
        nn.Conv2d(hidden, out, 1),
    )


class DualHeads(nn.Module):
    def __init__(self, dim: int, n_classes: int, hidden: Optional[int] = None, boundary: bool = True):
        super().__init__()
        hidden = hidden or dim
        self.seg = _head(dim, hidden, n_classes + 1)
        edge = _head(dim, hidden, 1)
        self.edge = edge if boundary else None

    def forward(self, refined: torch.Tensor, out_size):
        z_r = F.interpolate(self.seg(refined), size=tuple(out_size), mode="bilinear", align_corners=False)
        s_r = torch.softmax(z_r, dim=-3)
        if self.edge is None:
            return z_r, s_r, None, None
        z_b = F.interpolate(self.edge(refined), size=tuple(out_size), mode="bilinear", align_corners=False)
        z_b = z_b.squeeze(-3)
        return z_r, s_r, z_b, torch.sigmoid(z_b)


def one_hot(target: torch.Tensor, n_channels: int) -> torch.Tensor:
    oh = F.one_hot(target.long(), n_channels).movedim(-1, -3)
    return oh.to(torch.get_default_dtype())


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean foreground soft Dice, pooled over batch and pixels per class."""
    if probs.shape[-2:] != target.shape[-2:] or probs.dim() != target.dim() + 1:
        raise ShapeError(f"probs {tuple(probs.shape)} and target {tuple(target.shape)} disagree")
    n_channels = probs.shape[-3]
    if int(target.max()) >= n_channels or int(target.min()) < 0:
        raise ShapeError("target labels exceed the number of classes")
    g = one_hot(target, n_channels).to(probs.dtype)
    dims = [i for i in range(probs.dim()) if i != probs.dim() - 3]
    inter = (probs * g).sum(dim=dims)
    denom = probs.sum(dim=dims) + g.sum(dim=dims) + eps
    dice = 2 * inter / denom
    return 1 - dice[1:].mean()


def boundary_bce(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on clamped probabilities."""
    if probs.shape != target.shape:
        raise ShapeError(f"boundary probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    p = probs.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def downsample_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Nearest resize of an integer mask (B, H, W) that keeps pixel (s*i, s*j).

    Padded stride-2 convolutions centre output cell i on input pixel 2i, so
    this is the input pixel each coarse cell actually looks at.
    """
    m = mask[:, None].to(torch.float32)
    return F.interpolate(m, size=tuple(size), mode="nearest")[:, 0].long()


def upsample_aligned(grid: torch.Tensor, size) -> torch.Tensor:
    """Bilinear upsample of (B, C, h, w) to ``size`` with cell i placed on pixel s*i.

    The mapping mirrors :func:`downsample_mask`; beyond the last cell centre the
    values are held constant. ``size`` must be a multiple of the grid size.
    """
    (h, w), (H, W) = grid.shape[-2:], tuple(size)
    if H % h or W % w:
        raise ShapeError(f"{H}x{W} is not a multiple of the {h}x{w} grid")
    padded = F.pad(grid, (0, 1, 0, 1), mode="replicate")
    up = F.interpolate(padded, size=(H + 1, W + 1), mode="bilinear", align_corners=True)
    return up[..., :H, :W]


def total_loss(bundle: PredictionBundle, mask: torch.Tensor, boundary_target: Optional[torch.Tensor],
               lam: float = 0.5, mu_aux: float = 0.4) -> LossReport:
    """Region Dice + lam * boundary BCE + mu_aux * coarse Dice.

    Missing heads in the bundle drop their term (weight forced to zero).
    """
    if lam < 0 or mu_aux < 0:
        raise ConfigError("loss weights must be non-negative")
    l_seg = dice_loss(bundle.refined_probs, mask)
    zero = l_seg.new_zeros(())
    if bundle.boundary_probs is not None and boundary_target is not None:
        l_b = boundary_bce(bundle.boundary_probs, boundary_target)
    else:
        l_b, lam = zero, 0.0
    if bundle.coarse_probs is not None:
        small = downsample_mask(mask, bundle.coarse_probs.shape[-2:])
        l_c = dice_loss(bundle.coarse_probs, small)
    else:
        l_c, mu_aux = zero, 0.0
    total = l_seg + lam * l_b + mu_aux * l_c
    return LossReport(l_seg, l_b, l_c, total, float(lam), float(mu_aux))
