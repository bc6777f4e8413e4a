"""Droplet detection and scoring.

Detection is a marker-based watershed over the Euclidean distance transform:
Otsu threshold, 3x3 opening, distance transform, relative-height markers,
then a flood that splits touching droplets. The flood orders pixels by
geometry only (flood level, path length, distance to marker), never by
raster order, so segmenting a rotated or mirrored image yields the rotated
or mirrored segmentation exactly. Scoring then reduces each droplet to two
components: the fraction of its pixels outside an equal-area circle at its
centroid (geometric loss) and the fraction of image pixels left uncovered
(yield loss).

Loss arithmetic is integer pixel counting followed by one float division per
droplet, so results are reproducible against brute-force enumeration.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import WeightError
from .printer import BACKGROUND_INTENSITY, Raster

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SegmentationParams:
    """Knobs for the detection pipeline; defaults suit simulator output."""

    droplets_dark: bool = True  # invert so droplets are high-signal
    opening_size: int = 3
    opening_iterations: int = 1
    marker_rel_threshold: float = 0.4  # markers where dist > rel * max(dist)
    min_area: int = 5

    def __post_init__(self) -> None:
        if not (0.0 < self.marker_rel_threshold < 1.0):
            raise ValueError("marker_rel_threshold must be in (0, 1)")
        if self.min_area < 1 or self.opening_size < 1 or self.opening_iterations < 0:
            raise ValueError("invalid segmentation parameters")


@dataclass(frozen=True)
class DropletStats:
    label: int
    pixel_count: int
    centroid: tuple[float, float]  # (row, col)


@dataclass(frozen=True)
class LabeledSegmentation:
    """Per-pixel droplet labeling: 0 is background, 1..N index droplets."""

    labels: np.ndarray
    droplets: tuple[DropletStats, ...]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def droplet_pixel_total(self) -> int:
        return sum(d.pixel_count for d in self.droplets)


@dataclass(frozen=True)
class LossWeights:
    geometric: float = 1.0
    yield_: float = 1.0

    def __post_init__(self) -> None:
        if self.geometric < 0 or self.yield_ < 0:
            raise WeightError("loss weights must be >= 0")
        if self.geometric + self.yield_ == 0:
            raise WeightError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossScore:
    geometric: float
    yield_: float
    combined: float


def otsu_threshold(values: np.ndarray) -> int:
    """Otsu's threshold over a uint8 image; smallest maximizer on ties."""
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    omega = np.cumsum(hist)
    mu = np.cumsum(hist * np.arange(256))
    mu_total = mu[-1]
    best_t, best_v = 0, -1.0
    for t in range(255):
        w0, w1 = omega[t], total - omega[t]
        if w0 == 0 or w1 == 0:
            continue
        m0 = mu[t] / w0
        m1 = (mu_total - mu[t]) / w1
        v = w0 * w1 * (m0 - m1) ** 2
        if v > best_v:
            best_v, best_t = v, t
    return best_t


def segment(img: Raster, params: SegmentationParams | None = None) -> LabeledSegmentation:
    """Segment droplets from the substrate.

    An image with no detectable foreground yields zero droplets; that is a
    valid (maximally penalized) result, not an error.
    """
    if params is None:
        params = SegmentationParams()
    work = img.pixels
    if params.droplets_dark:
        work = (BACKGROUND_INTENSITY - work.astype(np.int16)).astype(np.uint8)

    t = otsu_threshold(work)
    foreground = work > t
    if params.opening_iterations > 0 and foreground.any():
        structure = np.ones((params.opening_size, params.opening_size), dtype=bool)
        foreground = ndi.binary_opening(
            foreground, structure=structure, iterations=params.opening_iterations
        )
    if not foreground.any():
        return LabeledSegmentation(
            labels=np.zeros(img.pixels.shape, dtype=np.int32), droplets=()
        )

    dist = ndi.distance_transform_edt(foreground)
    marker_mask = dist > params.marker_rel_threshold * dist.max()
    markers, _ = ndi.label(marker_mask, structure=EIGHT_CONNECTED)

    labels = _watershed_assign(foreground, dist, markers)
    return _collect(labels, params.min_area)


def _watershed_assign(foreground: np.ndarray, dist: np.ndarray, markers: np.ndarray) -> np.ndarray:
    """Assign every foreground pixel to exactly one droplet label."""
    out = np.zeros(foreground.shape, dtype=np.int32)
    components, n_comp = ndi.label(foreground, structure=EIGHT_CONNECTED)
    next_label = 0
    comp_slices = ndi.find_objects(components)
    for comp_idx in range(1, n_comp + 1):
        sl = comp_slices[comp_idx - 1]
        comp_mask = components[sl] == comp_idx
        marks_here = np.unique(markers[sl][comp_mask])
        marks_here = marks_here[marks_here > 0]
        if len(marks_here) <= 1:
            # a component without its own marker is still one droplet
            next_label += 1
            out[sl][comp_mask] = next_label
            continue
        flooded = _covariant_flood(comp_mask, dist[sl], markers[sl], marks_here)
        for m in sorted(int(v) for v in marks_here):
            next_label += 1
            out[sl][flooded == m] = next_label
    return out


def _covariant_flood(
    mask: np.ndarray, dist: np.ndarray, markers: np.ndarray, mark_ids: np.ndarray
) -> np.ndarray:
    """Flood a multi-marker component over -dist with geometry-only ordering.

    Queue keys are (flood level, path steps, squared distance to the marker,
    marker size, marker id); all but the final id are invariant under grid
    rotations and mirrorings, which makes the resulting partition covariant.
    """
    h, w = mask.shape
    lab = np.where(mask, markers, 0).astype(np.int32)
    lab[~np.isin(lab, mark_ids)] = 0
    level = -dist

    d2 = {}
    msize = {}
    for m in (int(v) for v in mark_ids):
        mmask = markers == m
        _, idx = ndi.distance_transform_edt(~mmask, return_indices=True)
        dy = np.arange(h, dtype=np.int64)[:, None] - idx[0]
        dx = np.arange(w, dtype=np.int64)[None, :] - idx[1]
        d2[m] = dy * dy + dx * dx
        msize[m] = int(mmask.sum())

    heap: list[tuple] = []
    for m in (int(v) for v in mark_ids):
        ys, xs = np.nonzero(lab == m)
        for y, x in zip(ys.tolist(), xs.tolist()):
            _push_neighbors(heap, lab, mask, level, d2, msize, m, y, x, 0, level[y, x])
    while heap:
        lv, steps, _, _, m, y, x = heapq.heappop(heap)
        if lab[y, x] != 0:
            continue
        lab[y, x] = m
        _push_neighbors(heap, lab, mask, level, d2, msize, m, y, x, steps, lv)
    return lab


def _push_neighbors(heap, lab, mask, level, d2, msize, m, y, x, steps, lv) -> None:
    h, w = mask.shape
    for dy, dx in _NEIGHBORS:
        ny, nx = y + dy, x + dx
        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and lab[ny, nx] == 0:
            heapq.heappush(
                heap,
                (max(lv, level[ny, nx]), steps + 1, int(d2[m][ny, nx]), msize[m], m, ny, nx),
            )


def _collect(labels: np.ndarray, min_area: int) -> LabeledSegmentation:
    final = np.zeros(labels.shape, dtype=np.int32)
    droplets: list[DropletStats] = []
    next_label = 0
    for lab in (int(v) for v in np.unique(labels) if v > 0):
        mask = labels == lab
        area = int(mask.sum())
        if area < min_area:
            continue
        next_label += 1
        final[mask] = next_label
        rows, cols = np.nonzero(mask)
        s_row, s_col = int(rows.sum()), int(cols.sum())
        droplets.append(
            DropletStats(
                label=next_label,
                pixel_count=area,
                centroid=(s_row / area, s_col / area),
            )
        )
    return LabeledSegmentation(labels=final, droplets=tuple(droplets))


def geometric_loss(seg: LabeledSegmentation) -> float:
    """Mean per-droplet fraction of pixels outside the equal-area circle.

    The circle is centered at the droplet centroid with radius sqrt(A/pi).
    Membership is decided in scaled integer arithmetic: pixel (i, j) lies
    inside iff (A*i - S_i)^2 + (A*j - S_j)^2 <= A^3/pi, where S are the
    coordinate sums. Returns 1.0 for an image with no droplets.
    """
    if not seg.droplets:
        return 1.0
    total = 0.0
    for d in seg.droplets:
        rows, cols = np.nonzero(seg.labels == d.label)
        area = rows.size
        s_row, s_col = int(rows.sum()), int(cols.sum())
        lhs = (area * rows.astype(np.int64) - s_row) ** 2 + (
            area * cols.astype(np.int64) - s_col
        ) ** 2
        threshold = float(area) ** 3 / math.pi
        outside = int((lhs.astype(np.float64) > threshold).sum())
        total += outside / area
    return total / len(seg.droplets)


def yield_loss(seg: LabeledSegmentation) -> float:
    """Fraction of image pixels not covered by any droplet."""
    total_px = seg.labels.size
    return (total_px - seg.droplet_pixel_total) / total_px


def combined_loss(seg: LabeledSegmentation, weights: LossWeights) -> LossScore:
    """Weighted mean of geometric and yield losses."""
    g = geometric_loss(seg)
    e = yield_loss(seg)
    combined = (weights.geometric * g + weights.yield_ * e) / (
        weights.geometric + weights.yield_
    )
    return LossScore(geometric=g, yield_=e, combined=combined)


def score_image(
    img: Raster,
    params: SegmentationParams | None = None,
    weights: LossWeights | None = None,
) -> LossScore:
    """Segment then score one sample image."""
    if weights is None:
        weights = LossWeights()
    return combined_loss(segment(img, params), weights)


_OVERLAY_PALETTE = (
    (230, 60, 60), (60, 160, 230), (60, 200, 90), (240, 180, 40),
    (170, 90, 230), (240, 120, 40), (60, 220, 210), (230, 80, 170),
)


def overlay_rgb(img: Raster, seg: LabeledSegmentation) -> np.ndarray:
    """Debug view: droplet pixels tinted by label over the grayscale image."""
    rgb = np.stack([img.pixels] * 3, axis=-1).astype(np.float64)
    for d in seg.droplets:
        color = np.array(_OVERLAY_PALETTE[(d.label - 1) % len(_OVERLAY_PALETTE)], dtype=float)
        mask = seg.labels == d.label
        rgb[mask] = 0.45 * rgb[mask] + 0.55 * color
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)
