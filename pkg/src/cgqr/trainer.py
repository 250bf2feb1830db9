"""Phase-specific training loop with teacher-forced warm-up and best-DSC checkpointing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import parameter_checksum, save_checkpoint
from .data import DatasetSplit, ImageSample, PHASES
from .errors import ConfigError, PreconditionError, TrainingDivergedError
from .evaluator import evaluate
from .heads import total_loss
from .model import CGQRNet, ModelConfig, mask_hash, normalize_ablations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    teacher_forcing_epochs: int = 20
    batch_size: int = 4
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    lam: float = 0.5
    mu_aux: float = 0.4
    seed: int = 0
    phase: str = "NONE"
    ablations: frozenset = frozenset()
    grad_clip: Optional[float] = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ablations", normalize_ablations(self.ablations))
        if self.epochs < 0 or not 0 <= self.teacher_forcing_epochs <= self.epochs:
            raise ConfigError("need 0 <= teacher_forcing_epochs <= epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.lam < 0 or self.mu_aux < 0 or self.weight_decay < 0:
            raise ConfigError("loss weights and weight decay must be non-negative")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        # small model, few hundred steps: a 10x larger step than the standard lr0
        base = dict(epochs=200, teacher_forcing_epochs=40, batch_size=4, lr0=1e-3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = sorted(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    model: CGQRNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    best_val_dsc: float = 0.0
    best_checkpoint: Optional[Path] = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def checksum(self) -> str:
        return parameter_checksum(self.model)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to zero at epoch E."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if cfg.epochs == 0:
        return cfg.lr0
    return 0.5 * cfg.lr0 * (1 + math.cos(math.pi * epoch / cfg.epochs))


def teacher_forcing_active(epoch: int, cfg: TrainConfig) -> bool:
    return epoch <= cfg.teacher_forcing_epochs and "no_teacher_forcing" not in cfg.ablations


def init_state(cfg: TrainConfig, model_config: Optional[ModelConfig] = None) -> TrainState:
    model_config = model_config or ModelConfig.desk()
    if cfg.ablations - model_config.ablations:
        model_config = replace(model_config, ablations=model_config.ablations | cfg.ablations)
    torch.manual_seed(cfg.seed)
    model = CGQRNet(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    return TrainState(model=model, optimizer=opt, config=cfg, rng=np.random.default_rng(cfg.seed))


def batch_tensors(samples: Sequence[ImageSample]):
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    boundary = torch.from_numpy(np.stack([s.boundary for s in samples]).astype(np.float32))
    return images, masks, boundary


def _model_of(state_or_model):
    return state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model


def forward_pass(samples, state_or_model, teacher_forcing: bool = False, training: bool = False):
    """Run the network on one sample or a list; returns ``(bundle, trace)``."""
    if isinstance(samples, ImageSample):
        samples = [samples]
    model = _model_of(state_or_model)
    images, masks, _ = batch_tensors(samples)
    was_training = model.training
    model.train(training)
    try:
        with torch.set_grad_enabled(training):
            return model(images, masks, teacher_forcing=teacher_forcing)
    finally:
        model.train(was_training)


def validate(state_or_model, samples: Sequence[ImageSample]) -> float:
    """Mean foreground DSC without teacher forcing, in inference mode."""
    if not samples:
        raise PreconditionError("validation needs at least one sample")
    return evaluate(_model_of(state_or_model), samples).mean_dsc


@torch.no_grad()
def mean_loss(state_or_model, samples: Sequence[ImageSample], cfg: Optional[TrainConfig] = None,
              batch_size: int = 8) -> float:
    """Average total objective over samples in inference mode."""
    model = _model_of(state_or_model)
    cfg = cfg or getattr(state_or_model, "config", TrainConfig())
    totals = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        bundle, _ = forward_pass(chunk, model)
        _, masks, boundary = batch_tensors(chunk)
        totals.append(float(total_loss(bundle, masks, boundary, cfg.lam, cfg.mu_aux).total) * len(chunk))
    return sum(totals) / len(samples)


class _JsonLog:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path is not None else None

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _meta(state: TrainState) -> dict:
    return {
        "config": state.config.to_dict(),
        "model_config": state.model.cfg.to_dict(),
        "epoch": state.epoch,
        "best_val_dsc": state.best_val_dsc,
    }


def train(cfg: TrainConfig, split: DatasetSplit, model_config: Optional[ModelConfig] = None,
          out_dir=None, state: Optional[TrainState] = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs; checkpoints go to ``out_dir`` when given.

    Writes ``train_log.jsonl`` (one record per step and per epoch),
    ``best.ckpt`` on strict validation improvement and ``last.ckpt`` at the end.
    """
    if not split.train:
        raise PreconditionError("training split is empty")
    val_samples = split.val or split.train
    state = state or init_state(cfg, model_config)
    model = state.model
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logger = _JsonLog(out / "train_log.jsonl" if out is not None else None)

    current = {}

    def hook(source, masks):
        current.setdefault("sources", []).append(source)
        current.setdefault("hashes", []).extend(mask_hash(m) for m in masks)

    model.contour_hooks.append(hook)
    step = 0
    try:
        if cfg.epochs == 0:
            state.best_val_dsc = validate(model, val_samples)
            logger.write({"type": "epoch", "epoch": 0, "lr": cfg.lr0, "val_dsc": state.best_val_dsc,
                          "teacher_forcing": False, "improved": True})
            if out is not None:
                state.best_checkpoint = save_checkpoint(out / "best.ckpt", model, _meta(state))
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(epoch - 1, cfg)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            tf = teacher_forcing_active(epoch, cfg)
            model.train()
            order = state.rng.permutation(len(split.train))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [split.train[i] for i in order[start : start + cfg.batch_size]]
                images, masks, boundary = batch_tensors(batch)
                current.clear()
                bundle, _ = model(images, masks, teacher_forcing=tf)
                report = total_loss(bundle, masks, boundary, cfg.lam, cfg.mu_aux)
                if not torch.isfinite(report.total):
                    snapshot = report.record(step=step, epoch=epoch,
                                             samples=[s.sample_id for s in batch])
                    if out is not None:
                        (out / "diverged.json").write_text(json.dumps(snapshot, indent=2))
                    raise TrainingDivergedError(f"non-finite loss at step {step}: {snapshot}")
                state.optimizer.zero_grad(set_to_none=True)
                report.total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                state.optimizer.step()
                source = current.get("sources", ["none"])[-1] if current.get("sources") else "none"
                state.provenance.append({
                    "epoch": epoch, "step": step, "teacher_forcing": tf, "source": source,
                    "hashes": list(current.get("hashes", [])),
                    "samples": [s.sample_id for s in batch],
                })
                logger.write(report.record(type="step", step=step, epoch=epoch,
                                           teacher_forcing=tf, contour_source=source))
                epoch_losses.append(float(report.total.detach()))
                step += 1
            val = validate(model, val_samples)
            state.epoch = epoch
            improved = val > state.best_val_dsc
            if improved:
                state.best_val_dsc = val
                if out is not None:
                    state.best_checkpoint = save_checkpoint(out / "best.ckpt", model, _meta(state))
            record = {"type": "epoch", "epoch": epoch, "lr": lr, "val_dsc": val,
                      "teacher_forcing": tf, "improved": improved,
                      "train_loss": float(np.mean(epoch_losses))}
            state.history.append(record)
            logger.write(record)
            log.info("epoch %d lr=%.3g loss=%.4f val_dsc=%.4f%s", epoch, lr, record["train_loss"],
                     val, " *" if improved else "")
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, _meta(state))
    finally:
        model.contour_hooks.remove(hook)
        logger.close()
    return state
