"""Non-learned contour geometry: region selection, Moore tracing, descriptors.

Nothing here is differentiable; masks come in as integer arrays and
descriptors leave as plain floats.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .pnm import atomic_write_text

N_POINTS = 64
DESCRIPTOR_DIM = 6
CROSS = ndimage.generate_binary_structure(2, 1)

# (drow, dcol), clockwise on screen starting from west
_DIRS = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


@dataclass
class Contour:
    class_id: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    present: bool = False
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    region_pixels: int = 0


@dataclass
class ShapeDescriptor:
    mu_x: float = 0.0
    mu_y: float = 0.0
    area: float = 0.0
    perimeter: float = 0.0
    sigma_x: float = 0.0
    sigma_y: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.mu_x, self.mu_y, self.area, self.perimeter, self.sigma_x, self.sigma_y],
            dtype=np.float64,
        )


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; ties go to the first in raster order."""
    labels, n = ndimage.label(binary, structure=CROSS)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def moore_trace(region: np.ndarray) -> np.ndarray:
    """Outer boundary of a single connected region as an (L, 2) array of (x, y).

    Moore-neighbour tracing from the top-left pixel; the walk stops as soon as
    a (pixel, backtrack) state repeats, which closes the loop even for
    one-pixel-wide parts visited twice.
    """
    padded = np.pad(np.asarray(region, dtype=bool), 1)
    rows, cols = np.nonzero(padded)
    if rows.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    first = np.lexsort((cols, rows))[0]
    start = (int(rows[first]), int(cols[first]))
    cur, back = start, 0  # west neighbour of the raster-first pixel is background
    seen = {}
    path = []
    while (cur, back) not in seen:
        seen[(cur, back)] = len(path)
        path.append(cur)
        for i in range(1, 9):
            nd = (back + i) % 8
            nr, nc = cur[0] + _DIRS[nd][0], cur[1] + _DIRS[nd][1]
            if padded[nr, nc]:
                prev = _DIRS[(nd - 1) % 8]
                pr, pc = cur[0] + prev[0], cur[1] + prev[1]
                back = _DIR_INDEX[(pr - nr, pc - nc)]
                cur = (nr, nc)
                break
        else:
            break  # isolated pixel
    loop = path[seen.get((cur, back), 0):]
    out = np.array([(c - 1, r - 1) for r, c in loop], dtype=np.int64)
    return out


def _signed_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def resample_closed(xy: np.ndarray, n_points: int) -> np.ndarray:
    """Uniform arc-length resampling of a closed polyline to ``n_points``."""
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) == 1:
        return np.repeat(xy, n_points, axis=0)
    closed = np.vstack([xy, xy[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(xy[:1], n_points, axis=0)
    t = np.arange(n_points) * (total / n_points)
    x = np.interp(t, cum, closed[:, 0])
    y = np.interp(t, cum, closed[:, 1])
    return np.stack([x, y], axis=1)


def closed_length(xy: np.ndarray) -> float:
    if len(xy) < 2:
        return 0.0
    closed = np.vstack([xy, xy[:1]])
    return float(np.sum(np.hypot(*np.diff(closed, axis=0).T)))


def extract_contours(mask, n_points: int = N_POINTS, n_classes: Optional[int] = None) -> list:
    """One contour per foreground class 1..K from a label mask.

    The largest 4-connected component of each class is hole-filled, traced,
    oriented counter-clockwise as displayed (y pointing down), resampled to
    ``n_points`` and normalized by (W, H). Pixel (col, row) maps to
    (col / W, row / H).
    """
    if n_points < 4:
        raise ValueError(f"n_points must be >= 4, got {n_points}")
    mask = np.asarray(mask)
    h, w = mask.shape
    k_total = int(mask.max(initial=0)) if n_classes is None else int(n_classes)
    contours = []
    for k in range(1, k_total + 1):
        comp = largest_component(mask == k)
        count = int(comp.sum())
        if count == 0:
            contours.append(Contour(class_id=k))
            continue
        trace = moore_trace(ndimage.binary_fill_holes(comp))
        ordered = trace
        # on-screen counter-clockwise means negative shoelace area with y down
        if len(trace) > 2 and _signed_area(trace.astype(np.float64)) > 0:
            ordered = np.vstack([trace[:1], trace[:0:-1]])
        pts = resample_closed(ordered, n_points)
        pts = pts / np.array([w, h], dtype=np.float64)
        contours.append(Contour(class_id=k, points=pts, present=True, trace=trace, region_pixels=count))
    return contours


def describe(contour: Contour, region_pixel_count: int, image_size) -> ShapeDescriptor:
    """Centroid, area, perimeter and per-axis spread of one contour.

    Area is divided by W*H and perimeter by 2(W+H) so every entry is O(1).
    """
    if not contour.present or len(contour.points) == 0:
        return ShapeDescriptor()
    h, w = image_size
    pts = np.asarray(contour.points, dtype=np.float64)
    mu = pts.mean(axis=0)
    sigma = pts.std(axis=0)
    perim_px = closed_length(pts * np.array([w, h], dtype=np.float64))
    return ShapeDescriptor(
        mu_x=float(mu[0]),
        mu_y=float(mu[1]),
        area=float(region_pixel_count) / (w * h),
        perimeter=perim_px / (2.0 * (w + h)),
        sigma_x=float(sigma[0]),
        sigma_y=float(sigma[1]),
    )


def descriptors_from_mask(mask, n_points: int = N_POINTS, image_size=None,
                          n_classes: Optional[int] = None) -> list:
    mask = np.asarray(mask)
    size = mask.shape if image_size is None else tuple(image_size)
    return [describe(c, c.region_pixels, size) for c in extract_contours(mask, n_points, n_classes)]


def descriptor_matrix(mask, n_classes: int, n_points: int = N_POINTS) -> np.ndarray:
    """(K, 6) float32 descriptor array for a mask."""
    descs = descriptors_from_mask(mask, n_points, n_classes=n_classes)
    if not descs:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    return np.stack([d.as_array() for d in descs]).astype(np.float32)


def contours_to_csv(contours: Sequence[Contour]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "x_norm", "y_norm"])
    for c in contours:
        for x, y in np.asarray(c.points).reshape(-1, 2):
            writer.writerow([c.class_id, f"{x:.6f}", f"{y:.6f}"])
    return buf.getvalue()


def write_contours_csv(contours: Sequence[Contour], path) -> None:
    atomic_write_text(path, contours_to_csv(contours))
