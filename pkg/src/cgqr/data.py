"""Dataset ingestion, preprocessing, boundary targets, splitting and synthetic data."""
from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PreconditionError, ShapeError
from .pnm import atomic_write_text, read_pnm, write_pnm

log = logging.getLogger(__name__)

VIEWS = ("2CH", "4CH", "SYNTH")
PHASES = ("ED", "ES", "NONE")
NORM_EPS = 1e-6
CROSS = ndimage.generate_binary_structure(2, 1)

_FILE_RE = re.compile(r"^(2CH|4CH|SYNTH)_(ED|ES|NONE)(?:_(\d+))?_img\.pgm$")


@dataclass
class RawSample:
    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    view: str = "SYNTH"
    phase: str = "NONE"
    frame: Optional[int] = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ShapeError(
                f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )
        if self.view not in VIEWS:
            raise ConfigError(f"unknown view {self.view!r}")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")

    @property
    def sample_id(self) -> str:
        return _sample_id(self.patient_id, self.view, self.phase, self.frame)


@dataclass
class ImageSample:
    image: np.ndarray  # float32, standardized
    mask: np.ndarray  # int64 labels
    boundary: np.ndarray  # uint8 {0, 1}
    patient_id: str
    phase: str = "NONE"
    view: str = "SYNTH"
    frame: Optional[int] = None

    @property
    def sample_id(self) -> str:
        return _sample_id(self.patient_id, self.view, self.phase, self.frame)


@dataclass
class DatasetSplit:
    train: list
    val: list
    split_ratio: float
    seed: int


@dataclass
class SynthConfig:
    n_patients: int = 10
    frames_per_patient: int = 4
    image_size: tuple = (64, 64)
    n_classes: int = 3
    noise_level: float = 0.3
    contrast: float = 0.8
    domain_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) < 32:
            raise ConfigError(f"image_size dims must be >= 32, got {self.image_size}")
        if self.n_patients < 1 or self.frames_per_patient < 1:
            raise ConfigError("n_patients and frames_per_patient must be >= 1")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if not 0 < self.contrast <= 1:
            raise ConfigError("contrast must lie in (0, 1]")
        if self.domain_shift < 0:
            raise ConfigError("domain_shift must be >= 0")


def _sample_id(patient_id, view, phase, frame) -> str:
    stem = f"{patient_id}_{view}_{phase}"
    return stem if frame is None else f"{stem}_{frame:03d}"


# --------------------------------------------------------------------------
# preprocessing


def normalize_image(image, eps: float = NORM_EPS) -> np.ndarray:
    """Per-image standardization ``(I - mean) / (std + eps)``.

    Constant images map to all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise PreconditionError("cannot normalize an empty image")
    mu = image.mean()
    sigma = image.std()
    return (image - mu) / (sigma + eps)


def _bilinear_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = arr.shape[axis]
    if in_len == out_len:
        return arr
    # half-pixel centers, edge-clamped
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0, in_len - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_len - 1)
    t = src - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    # a + t*(b - a) keeps constant signals exact
    return a + t.reshape(shape) * (b - a)


def nearest_indices(in_len: int, out_len: int) -> np.ndarray:
    idx = np.floor((np.arange(out_len) + 0.5) * (in_len / out_len)).astype(np.int64)
    return np.minimum(idx, in_len - 1)


def resize_image(image: np.ndarray, target) -> np.ndarray:
    h0, w0 = target
    out = _bilinear_axis(np.asarray(image, dtype=np.float64), int(h0), 0)
    return _bilinear_axis(out, int(w0), 1)


def resize_mask(mask: np.ndarray, target) -> np.ndarray:
    mask = np.asarray(mask)
    h0, w0 = target
    rows = nearest_indices(mask.shape[0], int(h0))
    cols = nearest_indices(mask.shape[1], int(w0))
    return mask[np.ix_(rows, cols)]


def resize_pair(image, mask, target):
    """Bilinear resize for the image, nearest-neighbour for the mask."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape or image.ndim != 2:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    h0, w0 = target
    if h0 < 1 or w0 < 1:
        raise ConfigError(f"target size must be >= 1, got {target}")
    if image.shape == (h0, w0):
        return image.astype(np.float64, copy=True), mask.copy()
    return resize_image(image, target), resize_mask(mask, target)


def make_boundary_target(mask, thickness: int = 1) -> np.ndarray:
    """Class-agnostic morphological gradient of a label mask.

    A pixel is marked when the labels within ``thickness`` cross-shaped
    dilation steps are not all equal. Borders use replicate padding.
    """
    if thickness < 1:
        raise ConfigError(f"thickness must be >= 1, got {thickness}")
    mask = np.asarray(mask)
    hi = mask
    lo = mask
    for _ in range(thickness):
        hi = ndimage.grey_dilation(hi, footprint=CROSS, mode="nearest")
        lo = ndimage.grey_erosion(lo, footprint=CROSS, mode="nearest")
    return (hi != lo).astype(np.uint8)


def preprocess(raw: RawSample, image_size=(256, 256), thickness: int = 1) -> ImageSample:
    # resize before standardizing so the emitted image carries exact moments
    image, mask = resize_pair(raw.image, raw.mask, image_size)
    image = normalize_image(image).astype(np.float32)
    mask = mask.astype(np.int64)
    return ImageSample(
        image=image,
        mask=mask,
        boundary=make_boundary_target(mask, thickness),
        patient_id=raw.patient_id,
        phase=raw.phase,
        view=raw.view,
        frame=raw.frame,
    )


def split_by_patient(samples: Sequence, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Patient-level split; every frame of a patient lands on one side.

    The number of training patients is ``round(ratio * n_patients)``, kept
    within ``[1, n_patients - 1]`` so neither side is empty.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 2:
        raise PreconditionError("need at least two distinct patients to split without leakage")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_train = int(math.floor(ratio * len(patients) + 0.5))
    n_train = min(max(n_train, 1), len(patients) - 1)
    train_ids = {patients[i] for i in order[:n_train]}
    train = [s for s in samples if s.patient_id in train_ids]
    val = [s for s in samples if s.patient_id not in train_ids]
    return DatasetSplit(train=train, val=val, split_ratio=ratio, seed=seed)


def extract_frames(sequence: Sequence[RawSample], drop_empty: bool = False) -> list:
    """Treat every frame as an independent sample, optionally dropping empty ones."""
    frames = list(sequence)
    if drop_empty:
        frames = [s for s in frames if np.any(np.asarray(s.mask) > 0)]
    return frames


# --------------------------------------------------------------------------
# synthetic echo-like data

BACKGROUND_LEVEL = 0.30
CLASS_LEVELS = {1: 0.08, 2: 0.82, 3: 0.18}


def _class_level(k: int) -> float:
    if k in CLASS_LEVELS:
        return CLASS_LEVELS[k]
    return 0.45 + 0.07 * ((k - 4) % 5)


def _ellipse(h, w, cy, cx, ry, rx, theta=0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _synth_mask(cfg: SynthConfig, geom: np.random.Generator, frame: int) -> np.ndarray:
    h, w = cfg.image_size
    k = cfg.n_classes
    mask = np.zeros((h, w), dtype=np.int64)
    # per-frame contraction emulates the cardiac cycle
    phase = 1.0 - 0.12 * math.sin(2 * math.pi * frame / max(cfg.frames_per_patient, 1))
    p = geom.uniform(size=8)
    endo_rx = (0.10 + 0.04 * p[0]) * w * phase
    endo_ry = (0.17 + 0.05 * p[1]) * h * phase
    wall = (0.08 + 0.03 * p[2]) * min(h, w)
    theta = -0.3 + 0.6 * p[3]
    la_rx = (0.10 + 0.04 * p[4]) * w
    la_ry = (0.07 + 0.03 * p[5]) * h
    cx = w * (0.45 + 0.1 * p[6])
    top = 0.06 * h + wall
    cy = top + endo_ry + 0.06 * h * p[7]

    endo = _ellipse(h, w, cy, cx, endo_ry, endo_rx, theta)
    epi = _ellipse(h, w, cy, cx, endo_ry + wall, endo_rx + wall, theta)
    mask[endo] = 1
    if k >= 2:
        mask[epi & ~endo] = 2
    if k >= 3:
        la_cy = cy + (endo_ry + wall) + la_ry + 0.03 * h
        la = _ellipse(h, w, la_cy, cx, la_ry, la_rx) & ~epi
        mask[la] = 3
    for extra in range(4, k + 1):
        for _ in range(60):
            ry = geom.uniform(0.04, 0.07) * h
            rx = geom.uniform(0.04, 0.07) * w
            ey = geom.uniform(ry + 1, h - ry - 1)
            ex = geom.uniform(rx + 1, w - rx - 1)
            blob = _ellipse(h, w, ey, ex, ry, rx)
            grown = ndimage.binary_dilation(blob, iterations=2)
            if not np.any(grown & (mask > 0)):
                mask[blob] = extra
                break
        else:
            raise ConfigError(f"cannot place region for class {extra} at size {cfg.image_size}")
    for c in range(1, k + 1):
        if not np.any(mask == c):
            raise ConfigError(f"class {c} is unplaceable at size {cfg.image_size}")
    return mask


def _synth_image(cfg: SynthConfig, mask: np.ndarray, noise: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    levels = np.full(cfg.n_classes + 1, BACKGROUND_LEVEL)
    for c in range(1, cfg.n_classes + 1):
        levels[c] = BACKGROUND_LEVEL + cfg.contrast * (_class_level(c) - BACKGROUND_LEVEL)
    image = levels[mask]
    if cfg.contrast < 1:
        image = ndimage.gaussian_filter(image, sigma=1.5 * (1 - cfg.contrast), mode="nearest")
    if cfg.noise_level > 0:
        grain = ndimage.gaussian_filter(noise.standard_normal((h, w)), sigma=0.7)
        grain /= grain.std() + 1e-12
        image = image * np.maximum(0.0, 1.0 + cfg.noise_level * grain)
    if cfg.domain_shift > 0:
        s = cfg.domain_shift
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        phase = noise.uniform(0, 2 * math.pi, size=2)
        wy = yy + s * math.sin(phase[0]) + s * np.sin(2 * math.pi * xx / w + phase[0])
        wx = xx + s * math.cos(phase[1]) + s * np.sin(2 * math.pi * yy / h + phase[1])
        image = ndimage.map_coordinates(image, [wy, wx], order=1, mode="nearest")
        image = np.clip(image, 0, None) ** (1.0 + s) + 0.1 * s
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig) -> list:
    """Deterministic echo-like samples with nested LV/wall/atrium regions."""
    samples = []
    for p in range(cfg.n_patients):
        for f in range(cfg.frames_per_patient):
            # same geometry stream for every frame of a patient
            geom = np.random.default_rng([cfg.seed, p, 0])
            mask = _synth_mask(cfg, geom, f)
            noise = np.random.default_rng([cfg.seed, p, f + 1, 1])
            image = _synth_image(cfg, mask, noise)
            samples.append(
                RawSample(image=image, mask=mask, patient_id=f"patient{p:04d}",
                          view="SYNTH", phase="NONE", frame=f)
            )
    return samples


# --------------------------------------------------------------------------
# on-disk layout


def _sample_filenames(sample) -> tuple:
    stem = f"{sample.view}_{sample.phase}"
    if sample.frame is not None:
        stem += f"_{sample.frame:03d}"
    return f"{stem}_img.pgm", f"{stem}_mask.pgm"


def _to_uint8_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_dataset(samples: Sequence[RawSample], root, manifest_extra: Optional[dict] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if int(np.max(s.mask, initial=0)) > 255:
            raise ConfigError("mask labels must fit in 8 bits")
        img_name, mask_name = _sample_filenames(s)
        write_pnm(root / s.patient_id / img_name, _to_uint8_image(s.image))
        write_pnm(root / s.patient_id / mask_name, s.mask.astype(np.uint8))
    manifest = {
        "patients": sorted({s.patient_id for s in samples}),
        "n_samples": len(samples),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(manifest_extra or {})
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def write_synthetic(cfg: SynthConfig, root, tag: Optional[str] = None) -> Path:
    samples = generate_synthetic(cfg)
    extra = {"config": asdict(cfg), "seed": cfg.seed, "tag": tag or Path(root).name}
    extra["config"]["image_size"] = list(cfg.image_size)
    return write_dataset(samples, root, extra)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("CGQR_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_dataset(root) -> list:
    """Read ``<root>/<patient>/<view>_<phase>[_<frame>]_img.pgm`` plus masks.

    Samples come back sorted by (patient, view, phase, frame) regardless of
    the number of loader threads.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    jobs = []
    for patient_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img_path in sorted(patient_dir.glob("*_img.pgm")):
            m = _FILE_RE.match(img_path.name)
            if not m:
                log.warning("skipping unrecognised file %s", img_path)
                continue
            mask_path = img_path.with_name(img_path.name[: -len("_img.pgm")] + "_mask.pgm")
            if not mask_path.exists():
                raise FileNotFoundError(f"missing mask for {img_path}")
            frame = int(m.group(3)) if m.group(3) is not None else None
            jobs.append((img_path, mask_path, patient_dir.name, m.group(1), m.group(2), frame))

    def _load(job):
        img_path, mask_path, pid, view, phase, frame = job
        return RawSample(
            image=read_pnm(img_path).astype(np.float64),
            mask=read_pnm(mask_path).astype(np.int64),
            patient_id=pid, view=view, phase=phase, frame=frame,
        )

    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        return list(pool.map(_load, jobs))


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())
    return {}
