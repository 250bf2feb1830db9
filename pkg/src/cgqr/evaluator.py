"""Dice metrics, evaluation reports and figure-panel emission."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import PreconditionError, ShapeError
from .heads import upsample_aligned
from .pnm import atomic_write_text, write_pnm

DSC_EPS = 1e-6
CLASS_NAMES = {1: "LV Endo.", 2: "LV Epi.", 3: "LA"}
PALETTE = np.array(
    [[0, 0, 0], [230, 60, 60], [60, 200, 90], [70, 110, 240], [240, 200, 40], [200, 80, 220], [40, 210, 210]],
    dtype=np.float64,
)


@dataclass
class ClassDice:
    class_id: int
    dsc: float
    support: int


@dataclass
class EvalReport:
    per_class: list
    mean_dsc: float
    dataset_tag: str
    n_samples: int
    config_echo: str = ""
    aggregation: str = "micro"

    def to_dict(self) -> dict:
        return {
            "dataset_tag": self.dataset_tag,
            "n_samples": self.n_samples,
            "aggregation": self.aggregation,
            "mean_dsc": self.mean_dsc,
            "per_class": [asdict(c) for c in self.per_class],
            "config_echo": self.config_echo,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, model_name: str = "CGQR-Net") -> str:
        names = [CLASS_NAMES.get(c.class_id, f"Class {c.class_id}") for c in self.per_class]
        header = ["Model"] + names + ["Average"]
        row = [model_name] + [f"{100 * c.dsc:.2f}" for c in self.per_class] + [f"{100 * self.mean_dsc:.2f}"]
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        rule = "-" * len(fmt(header))
        lines = [
            f"# dataset={self.dataset_tag} samples={self.n_samples} aggregation={self.aggregation} (DSC %)",
            rule, fmt(header), rule, fmt(row), rule,
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset_tag", "class_id", "dsc", "support"])
        for c in self.per_class:
            w.writerow([self.dataset_tag, c.class_id, f"{c.dsc:.6f}", c.support])
        w.writerow([self.dataset_tag, "mean", f"{self.mean_dsc:.6f}", ""])
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        return {"json": self.to_json, "table": self.to_table, "csv": self.to_csv}[fmt]()


def _ratio(inter: float, p: float, g: float, eps: float = DSC_EPS) -> float:
    if p + g == 0:
        return 1.0
    return 2.0 * inter / (p + g + eps)


def dsc(pred_mask, gt_mask, eps: float = DSC_EPS) -> float:
    """Hard Dice 2|P&G| / (|P| + |G| + eps); both empty gives 1."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return _ratio(float(np.sum(p & g)), float(p.sum()), float(g.sum()), eps)


def class_counts(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """(K, 3) array of [intersection, |P|, |G|] for classes 1..K."""
    out = np.zeros((n_classes, 3), dtype=np.int64)
    for k in range(1, n_classes + 1):
        p, g = pred == k, gt == k
        out[k - 1] = (np.sum(p & g), p.sum(), g.sum())
    return out


def _predict_masks(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        batch = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size]))
        pred = model.predict(batch)
        out.append(pred.cpu().numpy() if torch.is_tensor(pred) else np.asarray(pred))
    return np.concatenate(out)


def evaluate(model, samples: Sequence, tag: str = "", n_classes: Optional[int] = None,
             aggregation: str = "micro", batch_size: int = 8, config_echo: str = "") -> EvalReport:
    """Per-class and mean foreground DSC of ``model.predict`` over samples.

    ``micro`` pools intersections and sizes over every sample before the
    ratio; ``macro`` averages per-sample ratios.
    """
    if not samples:
        raise PreconditionError("evaluate needs at least one sample")
    if aggregation not in ("micro", "macro"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if n_classes is None:
        n_classes = getattr(getattr(model, "cfg", None), "n_classes", None)
        if n_classes is None:
            n_classes = int(max(s.mask.max() for s in samples))
    images = np.stack([s.image for s in samples]).astype(np.float32)
    preds = _predict_masks(model, images, batch_size)
    counts = [class_counts(p, s.mask, n_classes) for p, s in zip(preds, samples)]
    per_class = []
    for k in range(n_classes):
        support = int(sum(c[k, 2] for c in counts))
        if aggregation == "micro":
            inter, p, g = (float(sum(c[k, j] for c in counts)) for j in range(3))
            value = _ratio(inter, p, g)
        else:
            value = float(np.mean([_ratio(*map(float, c[k])) for c in counts]))
        per_class.append(ClassDice(class_id=k + 1, dsc=value, support=support))
    mean = float(sum(c.dsc for c in per_class) / len(per_class))
    return EvalReport(per_class, mean, tag, len(samples), config_echo, aggregation)


# --------------------------------------------------------------------------
# panels


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - lo) / (hi - lo) * 255).astype(np.uint8)


def _label_gray(mask: np.ndarray, n_classes: int) -> np.ndarray:
    return np.round(np.asarray(mask, dtype=np.float64) * 255 / max(n_classes, 1)).astype(np.uint8)


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list:
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_contours(contours: Sequence, shape) -> np.ndarray:
    """Closed polylines through each contour's points, in pixel units."""
    h, w = shape
    canvas = np.zeros((h, w), dtype=np.uint8)
    for c in contours:
        if not c.present:
            continue
        px = np.clip(np.round(c.points * np.array([w, h])).astype(int), 0, [w - 1, h - 1])
        for (x0, y0), (x1, y1) in zip(px, np.roll(px, -1, axis=0)):
            for x, y in bresenham(int(x0), int(y0), int(x1), int(y1)):
                canvas[y, x] = 255
    return canvas


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    gray = _to_gray(image).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    colors = PALETTE[np.asarray(labels) % len(PALETTE)]
    fg = np.asarray(labels) > 0
    rgb[fg] = (1 - alpha) * rgb[fg] + alpha * colors[fg]
    return np.round(rgb).astype(np.uint8)


PANELS = ("orig", "gt", "coarse", "contours", "boundary", "final", "overlay")


def emit_panels(sample, bundle, contours: Sequence, out_dir, sample_id: Optional[str] = None,
                n_classes: Optional[int] = None, index: int = 0) -> list:
    """Write the seven 8-bit diagnostic panels for one sample; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = sample_id or sample.sample_id
    h, w = sample.image.shape
    probs = bundle.refined_probs[index].detach().cpu()
    k = n_classes or probs.shape[0] - 1
    final = probs.argmax(dim=0).numpy()
    if bundle.coarse_probs is not None:
        cp = bundle.coarse_probs[index].detach().cpu()[None]
        coarse = upsample_aligned(cp, (h, w))
        coarse = coarse[0].argmax(dim=0).numpy()
    else:
        coarse = np.zeros((h, w), dtype=np.int64)
    if bundle.boundary_probs is not None:
        edge = np.round(bundle.boundary_probs[index].detach().cpu().numpy().astype(np.float64) * 255).astype(np.uint8)
    else:
        edge = np.zeros((h, w), dtype=np.uint8)
    panels = {
        "orig": _to_gray(sample.image),
        "gt": _label_gray(sample.mask, k),
        "coarse": _label_gray(coarse, k),
        "contours": rasterize_contours(contours, (h, w)),
        "boundary": edge,
        "final": _label_gray(final, k),
        "overlay": overlay(sample.image, final),
    }
    paths = []
    for name in PANELS:
        ext = "ppm" if name == "overlay" else "pgm"
        path = out_dir / f"{sid}_{name}.{ext}"
        write_pnm(path, panels[name])
        paths.append(path)
    return paths
