"""Contour queries, pyramid fusion and contour-guided cross-attention."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .contours import DESCRIPTOR_DIM
from .encoder import FeatureSet
from .errors import ShapeError
from .pnm import atomic_write_bytes, atomic_write_text


@dataclass
class QueryBank:
    queries: torch.Tensor  # (B, M, d)
    is_contour: torch.Tensor  # (M,) bool
    n_contour: int
    n_base: int

    @property
    def contour_queries(self) -> torch.Tensor:
        return self.queries[:, : self.n_contour]

    @property
    def base_queries(self) -> torch.Tensor:
        return self.queries[:, self.n_contour :]

    @property
    def M(self) -> int:
        return self.n_contour + self.n_base


@dataclass
class FusedTokens:
    tokens: torch.Tensor  # (B, N, d)
    spatial_shape: tuple

    def __post_init__(self):
        h, w = self.spatial_shape
        if self.tokens.shape[-2] != h * w:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens do not fill a {h}x{w} grid")


@dataclass
class AttentionTrace:
    weights: torch.Tensor  # (B, M, N)
    context: torch.Tensor  # (B, M, d)
    modulation: torch.Tensor  # (B, N, d)


def flatten(grid: torch.Tensor) -> FusedTokens:
    """(B, d, H, W) -> row-major tokens (B, H*W, d)."""
    h, w = grid.shape[-2:]
    return FusedTokens(grid.flatten(-2).transpose(-1, -2), (h, w))


def unflatten(tokens: FusedTokens) -> torch.Tensor:
    """Inverse of :func:`flatten`; token i lands on pixel (i // W, i % W)."""
    h, w = tokens.spatial_shape
    t = tokens.tokens
    if t.shape[-2] != h * w:
        raise ShapeError(f"cannot reshape {t.shape[-2]} tokens to {h}x{w}")
    return t.transpose(-1, -2).reshape(*t.shape[:-2], t.shape[-1], h, w)


def attention_refine(tokens, queries, w_q, w_k, w_v, w_m, gamma):
    """Cross-attention from queries to tokens followed by a gated residual.

    Shapes: tokens (..., N, d), queries (..., M, d), projections (d, d).
    Returns ``(refined, weights, context, modulation)``.
    """
    d = tokens.shape[-1]
    if queries.shape[-1] != d:
        raise ShapeError(f"query dim {queries.shape[-1]} != token dim {d}")
    keys = tokens @ w_k
    values = tokens @ w_v
    q = queries @ w_q
    logits = q @ keys.transpose(-1, -2) / math.sqrt(d)
    # softmax subtracts the row max internally
    weights = torch.softmax(logits, dim=-1)
    context = weights @ values
    modulation = weights.transpose(-1, -2) @ context @ w_m
    refined = tokens + gamma * modulation
    return refined, weights, context, modulation


class QueryEmbedding(nn.Module):
    """Affine projection of contour descriptors plus learned base queries."""

    def __init__(self, dim: int, n_base: int = 4, use_contour: bool = True):
        super().__init__()
        self.dim = dim
        self.use_contour = use_contour
        # built unconditionally so ablated variants draw the same initial values
        proj = nn.Linear(DESCRIPTOR_DIM, dim)
        self.proj = proj if use_contour else None
        self.base = nn.Parameter(torch.randn(n_base, dim) / math.sqrt(dim))

    def base_only(self, batch_size: int) -> QueryBank:
        n_base = self.base.shape[0]
        return QueryBank(self.base.expand(batch_size, -1, -1), torch.zeros(n_base, dtype=torch.bool), 0, n_base)

    def forward(self, descriptors: Optional[torch.Tensor], batch_size: int = 1) -> QueryBank:
        n_base = self.base.shape[0]
        if descriptors is not None and descriptors.dim() == 2:
            descriptors = descriptors[None]
        if self.use_contour:
            if descriptors is None or descriptors.shape[-1] != DESCRIPTOR_DIM:
                got = None if descriptors is None else tuple(descriptors.shape)
                raise ShapeError(f"expected (B, K, {DESCRIPTOR_DIM}) descriptors, got {got}")
            contour_q = self.proj(descriptors)
            b, k = contour_q.shape[:2]
            queries = torch.cat([contour_q, self.base.expand(b, -1, -1)], dim=1)
        else:
            return self.base_only(descriptors.shape[0] if descriptors is not None else batch_size)
        is_contour = torch.zeros(k + n_base, dtype=torch.bool)
        is_contour[:k] = True
        return QueryBank(queries, is_contour, k, n_base)


class PyramidFusion(nn.Module):
    """1x1 alignment of each branch to ``dim`` channels, nearest upsampling, sum."""

    def __init__(self, branch_channels, dim: int, use_all_branches: bool = True):
        super().__init__()
        align = [nn.Conv2d(c, dim, 1, bias=False) for c in branch_channels]
        self.align = nn.ModuleList(align if use_all_branches else align[:1])

    def forward(self, features: FeatureSet) -> FusedTokens:
        target = features.f1.shape[-2:]
        fused = None
        for psi, f in zip(self.align, features):
            x = psi(f)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="nearest")
            fused = x if fused is None else fused + x
        return flatten(fused)


class ContourCrossAttention(nn.Module):
    """Single-head, single-round query-to-token refinement with gate ``gamma``."""

    def __init__(self, dim: int, gamma_init: float = 0.0):
        super().__init__()
        scale = 1.0 / math.sqrt(dim)
        self.w_q = nn.Parameter(torch.randn(dim, dim) * scale)
        self.w_k = nn.Parameter(torch.randn(dim, dim) * scale)
        self.w_v = nn.Parameter(torch.randn(dim, dim) * scale)
        self.w_m = nn.Parameter(torch.randn(dim, dim) * scale)
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))

    def forward(self, tokens: FusedTokens, queries: QueryBank):
        refined, weights, context, modulation = attention_refine(
            tokens.tokens, queries.queries, self.w_q, self.w_k, self.w_v, self.w_m, self.gamma
        )
        return FusedTokens(refined, tokens.spatial_shape), AttentionTrace(weights, context, modulation)


def save_attention_trace(trace: AttentionTrace, path, index: int = 0) -> None:
    """Write one sample's trace as ``<path>.bin`` (float32 LE) and ``<path>.json``."""
    arrays = {
        "weights": trace.weights[index],
        "context": trace.context[index],
        "modulation": trace.modulation[index],
    }
    header = {"dtype": "float32", "byteorder": "little", "arrays": []}
    blobs = []
    offset = 0
    for name, t in arrays.items():
        a = t.detach().cpu().numpy().astype("<f4")
        header["arrays"].append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    path = str(path)
    atomic_write_bytes(path + ".bin", b"".join(blobs))
    atomic_write_text(path + ".json", json.dumps(header, indent=2) + "\n")


def load_attention_trace(path) -> dict:
    path = str(path)
    header = json.loads(open(path + ".json").read())
    raw = open(path + ".bin", "rb").read()
    out = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"]))
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
    return out
