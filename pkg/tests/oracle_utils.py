"""Independent brute-force oracles used to pin expected test values.

Everything here enumerates pixels or samples in plain Python, deliberately
avoiding the vectorized code paths under test.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def flood_fill_components(mask) -> list[set[tuple[int, int]]]:
    """8-connected components of a boolean grid via BFS, in raster order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = set()
    components = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or (i, j) in seen:
                continue
            comp = set()
            queue = deque([(i, j)])
            seen.add((i, j))
            while queue:
                y, x = queue.popleft()
                comp.add((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if (
                            0 <= ny < h
                            and 0 <= nx < w
                            and mask[ny, nx]
                            and (ny, nx) not in seen
                        ):
                            seen.add((ny, nx))
                            queue.append((ny, nx))
            components.append(comp)
    return components


def droplet_circle_stats(pixels: list[tuple[int, int]]) -> tuple[int, int]:
    """(area, pixels outside the equal-area circle) by direct enumeration.

    Uses the same scaled-integer membership contract as the implementation:
    (A*i - S_i)^2 + (A*j - S_j)^2 > A^3/pi, compared in float64.
    """
    area = len(pixels)
    s_i = sum(i for i, _ in pixels)
    s_j = sum(j for _, j in pixels)
    threshold = float(area) ** 3 / math.pi
    outside = 0
    for i, j in pixels:
        lhs = (area * i - s_i) ** 2 + (area * j - s_j) ** 2
        if float(lhs) > threshold:
            outside += 1
    return area, outside


def brute_force_losses(labels) -> tuple[float, float, list[tuple[int, int]]]:
    """(geometric, yield, per-droplet (area, outside)) from a label grid."""
    labels = np.asarray(labels)
    h, w = labels.shape
    by_label: dict[int, list[tuple[int, int]]] = {}
    for i in range(h):
        for j in range(w):
            lab = int(labels[i, j])
            if lab > 0:
                by_label.setdefault(lab, []).append((i, j))
    if not by_label:
        return 1.0, 1.0, []
    stats = []
    total = 0.0
    for lab in sorted(by_label):
        area, outside = droplet_circle_stats(by_label[lab])
        stats.append((area, outside))
        total += outside / area
    geometric = total / len(stats)
    covered = sum(a for a, _ in stats)
    yield_frac = (h * w - covered) / (h * w)
    return geometric, yield_frac, stats


def mc_expected_improvement(
    mean: float, sd: float, f_star: float, n: int = 1_000_000, seed: int = 0
) -> tuple[float, float]:
    """Monte-Carlo estimate of E[max(0, f_star - N(mean, sd^2))] and its SE."""
    draws = np.random.default_rng(seed).normal(mean, sd, size=n)
    improvement = np.maximum(0.0, f_star - draws)
    return float(improvement.mean()), float(improvement.std(ddof=1) / math.sqrt(n))


def draw_disk(pixels, cy: float, cx: float, r: float, value: int = 40) -> None:
    """Stamp a filled disk into a uint8 grid (pixel-center membership)."""
    h, w = pixels.shape
    for i in range(max(0, int(cy - r) - 1), min(h, int(cy + r) + 2)):
        for j in range(max(0, int(cx - r) - 1), min(w, int(cx + r) + 2)):
            if (i - cy) ** 2 + (j - cx) ** 2 <= r * r:
                pixels[i, j] = value
