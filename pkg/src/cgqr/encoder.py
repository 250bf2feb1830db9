"""Parallel multi-resolution encoder with repeated cross-scale exchange."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    branch_channels: tuple = (32, 64, 128)
    branch_strides: tuple = (4, 8, 16)
    n_stages: int = 3

    def __post_init__(self):
        object.__setattr__(self, "branch_channels", tuple(int(c) for c in self.branch_channels))
        object.__setattr__(self, "branch_strides", tuple(int(s) for s in self.branch_strides))
        if len(self.branch_channels) != 3 or len(self.branch_strides) != 3:
            raise ConfigError("encoder needs exactly three branches")
        if min(self.branch_channels) < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        s1, s2, s3 = self.branch_strides
        if not (s1 < s2 < s3):
            raise ConfigError(f"strides must increase strictly, got {self.branch_strides}")
        for s in self.branch_strides:
            if s < 1 or s & (s - 1):
                raise ConfigError(f"strides must be powers of two, got {self.branch_strides}")
        if self.n_stages < 1:
            raise ConfigError("n_stages must be >= 1")

    def check_input(self, height: int, width: int) -> None:
        for s in self.branch_strides:
            if height % s or width % s:
                raise ShapeError(
                    f"input size {height}x{width} is not divisible by branch stride {s}"
                )

    def feature_shapes(self, height: int, width: int) -> list:
        return [(c, height // s, width // s) for c, s in zip(self.branch_channels, self.branch_strides)]


@dataclass
class FeatureSet:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor

    def __iter__(self):
        return iter((self.f1, self.f2, self.f3))

    def __getitem__(self, i):
        return (self.f1, self.f2, self.f3)[i]

    @property
    def shapes(self) -> list:
        return [tuple(f.shape[-3:]) for f in self]


def conv_bn(cin, cout, kernel=3, stride=1, relu=True) -> nn.Sequential:
    layers = [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
    ]
    if relu:
        layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            conv_bn(channels, channels),
            conv_bn(channels, channels, relu=False),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def _downsampler(cin: int, cout: int, steps: int, final_relu: bool) -> nn.Sequential:
    layers = []
    for i in range(steps):
        last = i == steps - 1
        layers.append(conv_bn(cin, cout if last else cin, stride=2, relu=final_relu or not last))
    return nn.Sequential(*layers)


class _Upsampler(nn.Module):
    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        self.proj = conv_bn(cin, cout, kernel=1, relu=False)
        self.factor = factor

    def forward(self, x):
        return F.interpolate(self.proj(x), scale_factor=self.factor, mode="nearest")


class FusionStage(nn.Module):
    """One exchange round: X_k <- f_k(X_k) + sum_{j != k} phi_{j->k}(X_j)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        ch, st = cfg.branch_channels, cfg.branch_strides
        self.branches = nn.ModuleList(ResidualBlock(c) for c in ch)
        self.exchange = nn.ModuleDict()
        for k in range(3):
            for j in range(3):
                if j == k:
                    continue
                if j > k:
                    mod = _Upsampler(ch[j], ch[k], st[j] // st[k])
                else:
                    mod = _downsampler(ch[j], ch[k], int(math.log2(st[k] // st[j])), final_relu=False)
                self.exchange[f"{j}to{k}"] = mod

    def forward(self, xs):
        out = []
        for k in range(3):
            y = self.branches[k](xs[k])
            for j in range(3):
                if j != k:
                    y = y + self.exchange[f"{j}to{k}"](xs[j])
            out.append(y)
        return out


class HRNetEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.branch_channels
        s1, s2, s3 = cfg.branch_strides
        stem_steps = int(math.log2(s1))
        if stem_steps == 0:
            stem = [conv_bn(cfg.in_channels, c1)]
        else:
            stem = [conv_bn(cfg.in_channels, c1, stride=2)]
            stem += [conv_bn(c1, c1, stride=2) for _ in range(stem_steps - 1)]
        self.stem = nn.Sequential(*stem)
        self.to_branch2 = _downsampler(c1, c2, int(math.log2(s2 // s1)), final_relu=True)
        self.to_branch3 = _downsampler(c2, c3, int(math.log2(s3 // s2)), final_relu=True)
        self.stages = nn.ModuleList(FusionStage(cfg) for _ in range(cfg.n_stages))

    def forward(self, image: torch.Tensor) -> FeatureSet:
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[:, None]
        self.cfg.check_input(image.shape[-2], image.shape[-1])
        x1 = self.stem(image)
        x2 = self.to_branch2(x1)
        x3 = self.to_branch3(x2)
        xs = [x1, x2, x3]
        for stage in self.stages:
            xs = stage(xs)
        return FeatureSet(*xs)


def _conv_bn_count(cin, cout, kernel=3) -> int:
    return kernel * kernel * cin * cout + 2 * cout


def _chain_count(cin, cout, steps) -> int:
    return (steps - 1) * _conv_bn_count(cin, cin) + _conv_bn_count(cin, cout)


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form count of learned encoder parameters (weights and BN affines)."""
    ch, st = cfg.branch_channels, cfg.branch_strides
    stem_steps = max(1, int(math.log2(st[0])))
    total = _conv_bn_count(cfg.in_channels, ch[0]) + (stem_steps - 1) * _conv_bn_count(ch[0], ch[0])
    total += _chain_count(ch[0], ch[1], int(math.log2(st[1] // st[0])))
    total += _chain_count(ch[1], ch[2], int(math.log2(st[2] // st[1])))
    stage = 0
    for k in range(3):
        stage += 2 * _conv_bn_count(ch[k], ch[k])
        for j in range(3):
            if j > k:
                stage += _conv_bn_count(ch[j], ch[k], kernel=1)
            elif j < k:
                stage += _chain_count(ch[j], ch[k], int(math.log2(st[k] // st[j])))
    return total + cfg.n_stages * stage
