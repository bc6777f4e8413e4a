"""Synthesis backends: a deterministic droplet-deposition simulator and a
file-drop protocol for driving real hardware.

The simulator renders dark droplets on a light substrate. Pressure sets the
material volume per droplet, actuation frequency sets the emission rate,
and translation speed sets both the nominal droplet spacing and the
positional scatter, so each parameter reproduces the qualitative hardware
behavior the loop is meant to optimize.
"""
from __future__ import annotations

import json
import math
import os
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ImageFormatError, SynthesisTimeoutError
from .sampling import PrintConditions

BACKGROUND_INTENSITY = 255
DROPLET_INTENSITY = 40
TEXTURE_SPAN = 10  # droplet texture noise is uniform in [-span, +span]

MIN_RASTER_SIDE = 16

REQUEST_SUFFIX = ".req.json"
RESPONSE_SUFFIX = ".png"
POLL_INTERVAL_S = 0.25


@dataclass(frozen=True)
class Raster:
    """Grayscale sample image; ``pixels[row, col]`` with 0 the darkest value."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ImageFormatError("raster pixels must be a 2-D uint8 array")
        h, w = self.pixels.shape
        if h < MIN_RASTER_SIDE or w < MIN_RASTER_SIDE:
            raise ImageFormatError(
                f"raster must be at least {MIN_RASTER_SIDE}x{MIN_RASTER_SIDE}, got {w}x{h}"
            )

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def save_png(raster: Raster, path: str | Path) -> None:
    """Write a raster as an 8-bit grayscale PNG (atomic replace)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(raster.pixels, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path: str | Path) -> Raster:
    """Load an 8-bit grayscale or RGB PNG as a raster.

    RGB inputs are converted by luminance Y = 0.299 R + 0.587 G + 0.114 B,
    rounded half-up. Anything else is rejected.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "L":
                pixels = np.asarray(img, dtype=np.uint8)
            elif mode in ("RGB", "RGBA", "P"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
                pixels = np.floor(lum + 0.5).astype(np.uint8)
            else:
                raise ImageFormatError(f"unsupported image mode {mode!r} in {path}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return Raster(pixels=pixels)


@dataclass(frozen=True)
class SimPrinterConfig:
    """Simulator settings.

    ``flow_coeff`` [mm^3/(s*MPa)] converts pressure into deposited volume per
    unit time; ``jitter_coeff`` [mm*s/mm] scales positional noise with the
    translation speed. Optional per-step delays mimic hardware timings and
    default to zero.
    """

    canvas: tuple[int, int] = (400, 400)  # (width, height) pixels
    scan_rows: int = 10
    px_per_mm: float = 10.0
    flow_coeff: float = 2000.0
    jitter_coeff: float = 0.001
    seed: int = 0
    setup_delay_s: float = 0.0
    print_delay_s: float = 0.0
    image_delay_s: float = 0.0

    def __post_init__(self) -> None:
        w, h = self.canvas
        if w < MIN_RASTER_SIDE or h < MIN_RASTER_SIDE:
            raise ConfigError(f"canvas must be at least {MIN_RASTER_SIDE} px per side")
        if self.scan_rows < 1:
            raise ConfigError("scan_rows must be >= 1")
        if self.px_per_mm <= 0 or self.flow_coeff <= 0:
            raise ConfigError("px_per_mm and flow_coeff must be > 0")
        if self.jitter_coeff < 0:
            raise ConfigError("jitter_coeff must be >= 0")
        if min(self.setup_delay_s, self.print_delay_s, self.image_delay_s) < 0:
            raise ConfigError("simulated delays must be >= 0")


def droplet_radius_px(cond: PrintConditions, cfg: SimPrinterConfig) -> float:
    """Disk radius in pixels for one droplet under the given conditions."""
    volume_mm3 = cfg.flow_coeff * cond.pressure / cond.frequency
    radius_mm = (3.0 * volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)
    return radius_mm * cfg.px_per_mm


def simulate_print(cond: PrintConditions, cfg: SimPrinterConfig) -> Raster:
    """Render the droplet structure deposited under ``cond``.

    The printhead follows a serpentine path over ``scan_rows`` rows. Droplets
    are emitted at frequency f while the head moves at speed v, giving a
    nominal spacing of v/f; each center is perturbed by seeded Gaussian noise
    with standard deviation ``jitter_coeff * v``. Overlapping disks merge into
    a single connected blob. Deterministic per (cond, cfg.seed).
    """
    width, height = cfg.canvas
    radius_px = droplet_radius_px(cond, cfg)
    if 2.0 * radius_px >= min(width, height):
        raise ConfigError(
            f"canvas {width}x{height} cannot hold a droplet of radius {radius_px:.1f} px"
        )

    rng = np.random.default_rng(cfg.seed)
    pixels = np.full((height, width), BACKGROUND_INTENSITY, dtype=np.uint8)

    row_length_mm = width / cfg.px_per_mm
    spacing_mm = cond.speed / cond.frequency
    per_row = int(math.floor(row_length_mm * cond.frequency / cond.speed))
    sigma_px = cfg.jitter_coeff * cond.speed * cfg.px_per_mm
    row_pitch = height / cfg.scan_rows

    for row in range(cfg.scan_rows):
        cy = (row + 0.5) * row_pitch
        for k in range(per_row):
            x_mm = (k + 0.5) * spacing_mm
            if row % 2 == 1:
                x_mm = row_length_mm - x_mm
            cx = x_mm * cfg.px_per_mm
            if sigma_px > 0:
                dy, dx = rng.normal(0.0, sigma_px, size=2)
            else:
                dy = dx = 0.0
            _stamp_disk(pixels, cy + dy, cx + dx, radius_px, rng)

    return Raster(pixels=pixels)


def _stamp_disk(pixels: np.ndarray, cy: float, cx: float, r: float, rng) -> None:
    h, w = pixels.shape
    i0 = max(0, int(math.floor(cy - r)))
    i1 = min(h - 1, int(math.ceil(cy + r)))
    j0 = max(0, int(math.floor(cx - r)))
    j1 = min(w - 1, int(math.ceil(cx + r)))
    if i0 > i1 or j0 > j1:
        return
    ii, jj = np.mgrid[i0 : i1 + 1, j0 : j1 + 1]
    mask = (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r
    count = int(mask.sum())
    if count == 0:
        return
    texture = DROPLET_INTENSITY + rng.integers(-TEXTURE_SPAN, TEXTURE_SPAN + 1, size=count)
    region = pixels[i0 : i1 + 1, j0 : j1 + 1]
    region[mask] = np.clip(texture, 0, BACKGROUND_INTENSITY - 1).astype(np.uint8)


def write_print_request(cond: PrintConditions, inbox: str | Path, request_id: str) -> Path:
    """Drop a request record for external hardware into ``inbox``."""
    inbox = Path(inbox)
    payload = {"id": request_id, **cond.to_dict()}
    path = inbox / f"{request_id}{REQUEST_SUFFIX}"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_print_request(path: str | Path) -> tuple[str, PrintConditions]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return str(data["id"]), PrintConditions.from_dict(data)


def replay_print(
    cond: PrintConditions,
    inbox: str | Path,
    timeout: float,
    request_id: str | None = None,
    poll_interval: float = POLL_INTERVAL_S,
) -> Raster:
    """Request a print from external hardware and wait for its image.

    Writes ``<id>.req.json`` into ``inbox`` and polls for ``<id>.png`` until
    ``timeout`` seconds have elapsed. One request should be in flight per
    inbox; the loop is inherently sequential.
    """
    inbox = Path(inbox)
    if not inbox.is_dir():
        raise ConfigError(f"inbox directory does not exist: {inbox}")
    if request_id is None:
        request_id = uuid.uuid4().hex
    write_print_request(cond, inbox, request_id)
    response = inbox / f"{request_id}{RESPONSE_SUFFIX}"
    deadline = time.monotonic() + timeout
    while True:
        if response.exists():
            return load_png(response)
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise SynthesisTimeoutError(
                f"no response image {response.name} within {timeout} s"
            )
        time.sleep(min(poll_interval, remaining))


class SimulatedPrinter:
    """Loop backend that renders prints in-process.

    Each print gets its own child seed derived from the configured base seed
    and the request tag, so a full run is reproducible while individual
    prints remain independent.
    """

    name = "sim"

    def __init__(self, cfg: SimPrinterConfig):
        self.cfg = cfg

    def print_seed(self, cond: PrintConditions) -> int:
        # keyed by the condition itself: re-printing identical conditions
        # reproduces the identical structure, like a pure forward model
        bits = np.array(cond.as_array(), dtype=np.float64).view(np.uint64)
        seq = np.random.SeedSequence((self.cfg.seed, *(int(b) for b in bits)))
        return int(seq.generate_state(1)[0])

    def synthesize(self, cond: PrintConditions, index: int) -> tuple[Raster, dict]:
        t0 = time.perf_counter()
        if self.cfg.setup_delay_s:
            time.sleep(self.cfg.setup_delay_s)
        setup_s = time.perf_counter() - t0

        t1 = time.perf_counter()
        raster = simulate_print(cond, replace(self.cfg, seed=self.print_seed(cond)))
        if self.cfg.print_delay_s:
            time.sleep(self.cfg.print_delay_s)
        print_s = time.perf_counter() - t1

        t2 = time.perf_counter()
        if self.cfg.image_delay_s:
            time.sleep(self.cfg.image_delay_s)
        image_s = time.perf_counter() - t2
        return raster, {"setup_s": setup_s, "print_s": print_s, "image_s": image_s, "read_s": 0.0}


class ReplayPrinter:
    """Loop backend that defers synthesis to external hardware via file drop."""

    name = "replay"

    def __init__(self, inbox: str | Path, timeout: float, poll_interval: float = POLL_INTERVAL_S):
        self.inbox = Path(inbox)
        self.timeout = timeout
        self.poll_interval = poll_interval

    def synthesize(self, cond: PrintConditions, index: int) -> tuple[Raster, dict]:
        t0 = time.perf_counter()
        raster = replay_print(
            cond,
            self.inbox,
            self.timeout,
            request_id=f"print-{index:04d}",
            poll_interval=self.poll_interval,
        )
        elapsed = time.perf_counter() - t0
        return raster, {"setup_s": 0.0, "print_s": elapsed, "image_s": 0.0, "read_s": 0.0}
