import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from droploop import (
    ConfigError,
    ImageFormatError,
    PrintConditions,
    Raster,
    SimPrinterConfig,
    SimulatedPrinter,
    SynthesisTimeoutError,
    load_png,
    replay_print,
    save_png,
    simulate_print,
)
from droploop.printer import (
    BACKGROUND_INTENSITY,
    droplet_radius_px,
    read_print_request,
    write_print_request,
)

from oracle_utils import flood_fill_components

# spaced-out configuration where every droplet is a clean disjoint disk
SPARSE_CFG = SimPrinterConfig(
    canvas=(400, 400), scan_rows=4, px_per_mm=10.0, flow_coeff=800.0, jitter_coeff=0.0, seed=3
)


class TestSimulatePrint:
    def test_deterministic(self):
        cond = PrintConditions(0.08, 25.0, 300.0)
        cfg = SimPrinterConfig(seed=11)
        a = simulate_print(cond, cfg)
        b = simulate_print(cond, cfg)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_disjoint_disk_count_matches_model(self):
        # spacing v/f = 25 mm = 250 px >> 2r, so every droplet is separate
        cond = PrintConditions(0.05, 20.0, 500.0)
        raster = simulate_print(cond, SPARSE_CFG)
        comps = flood_fill_components(raster.pixels < 128)
        row_length_mm = SPARSE_CFG.canvas[0] / SPARSE_CFG.px_per_mm
        per_row = math.floor(row_length_mm * cond.frequency / cond.speed)
        assert len(comps) == per_row * SPARSE_CFG.scan_rows
        r = droplet_radius_px(cond, SPARSE_CFG)
        expected_area = math.pi * r * r
        for comp in comps:
            assert abs(len(comp) - expected_area) <= 0.1 * expected_area + 5

    def test_blob_area_monotone_in_pressure(self):
        areas = []
        for p in (0.03, 0.06, 0.09, 0.12, 0.15):
            raster = simulate_print(PrintConditions(p, 20.0, 500.0), SPARSE_CFG)
            comps = flood_fill_components(raster.pixels < 128)
            areas.append(np.mean([len(c) for c in comps]))
        assert all(b >= a for a, b in zip(areas, areas[1:]))

    def test_nominal_spacing_follows_speed_over_frequency(self):
        # centers of adjacent disks in one row sit v/f apart
        cond = PrintConditions(0.05, 20.0, 300.0)
        raster = simulate_print(cond, SPARSE_CFG)
        comps = flood_fill_components(raster.pixels < 128)
        rows = {}
        for comp in comps:
            ys = [p[0] for p in comp]
            xs = [p[1] for p in comp]
            rows.setdefault(round(np.mean(ys) / 50), []).append(np.mean(xs))
        expected_px = cond.speed / cond.frequency * SPARSE_CFG.px_per_mm
        for centers in rows.values():
            centers = sorted(centers)
            for a, b in zip(centers, centers[1:]):
                assert abs((b - a) - expected_px) <= 2.0

    def test_droplets_darker_than_background(self):
        raster = simulate_print(PrintConditions(0.1, 30.0, 200.0), SimPrinterConfig(seed=5))
        values = set(np.unique(raster.pixels).tolist())
        assert BACKGROUND_INTENSITY in values
        assert all(v < BACKGROUND_INTENSITY for v in values - {BACKGROUND_INTENSITY})

    def test_canvas_too_small_rejected(self):
        cfg = SimPrinterConfig(canvas=(64, 64), flow_coeff=1e6, seed=0)
        with pytest.raises(ConfigError):
            simulate_print(PrintConditions(0.15, 15.0, 100.0), cfg)

    def test_golden_regression(self, tmp_path):
        golden = json.loads(
            (Path(__file__).parent / "data" / "golden_print.json").read_text()
        )
        cond = PrintConditions(0.05, 30.0, 500.0)
        cfg = SimPrinterConfig(seed=1)  # px_per_mm 10, canvas 400x400 defaults
        raster = simulate_print(cond, cfg)
        reference = load_png(Path(__file__).parent / "data" / "golden_print.png")
        np.testing.assert_array_equal(raster.pixels, reference.pixels)
        comps = flood_fill_components(raster.pixels < 128)
        assert len(comps) == golden["blob_count"]
        assert sorted(len(c) for c in comps) == golden["blob_areas"]


class TestRasterPng:
    def test_round_trip_bits(self, tmp_path):
        rng = np.random.default_rng(0)
        raster = Raster(pixels=rng.integers(0, 256, size=(33, 47), dtype=np.uint8))
        path = tmp_path / "img.png"
        save_png(raster, path)
        np.testing.assert_array_equal(load_png(path).pixels, raster.pixels)

    def test_rgb_luminance_rounds_half_up(self, tmp_path):
        rgb = np.zeros((16, 16, 3), dtype=np.uint8)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 10, 20, 30
        path = tmp_path / "rgb.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        # 0.299*10 + 0.587*20 + 0.114*30 = 18.15 -> 18
        assert np.all(load_png(path).pixels == 18)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 15, 15, 20
        Image.fromarray(rgb, mode="RGB").save(path)
        # 0.299*15 + 0.587*15 + 0.114*20 = 15.57 -> 16
        assert np.all(load_png(path).pixels == 16)

    def test_undecodable_file_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not a png at all")
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_16bit_png_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        Image.fromarray(np.zeros((20, 20), dtype=np.uint16), mode="I;16").save(path)
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_too_small_raster_rejected(self):
        with pytest.raises(ImageFormatError):
            Raster(pixels=np.zeros((8, 8), dtype=np.uint8))


class TestReplayProtocol:
    def test_request_round_trip_is_lossless(self, tmp_path):
        cond = PrintConditions(0.053, 39.8, 260.0)
        path = write_print_request(cond, tmp_path, "fixture")
        request_id, parsed = read_print_request(path)
        assert request_id == "fixture"
        assert parsed == cond  # bit-exact float round trip through JSON

    def test_preplaced_response_returns_immediately(self, tmp_path):
        raster = Raster(pixels=np.full((32, 32), 200, dtype=np.uint8))
        save_png(raster, tmp_path / "req1.png")
        t0 = time.monotonic()
        result = replay_print(
            PrintConditions(0.05, 20.0, 400.0), tmp_path, timeout=5.0, request_id="req1"
        )
        assert time.monotonic() - t0 < 1.0
        np.testing.assert_array_equal(result.pixels, raster.pixels)
        assert (tmp_path / "req1.req.json").exists()

    def test_empty_inbox_times_out(self, tmp_path):
        with pytest.raises(SynthesisTimeoutError):
            replay_print(PrintConditions(0.05, 20.0, 400.0), tmp_path, timeout=0.1)

    def test_missing_inbox_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            replay_print(PrintConditions(0.05, 20.0, 400.0), tmp_path / "nope", timeout=0.1)


class TestSimulatedPrinter:
    def test_condition_keyed_reproducibility(self):
        printer = SimulatedPrinter(SimPrinterConfig(seed=9))
        cond = PrintConditions(0.07, 28.0, 350.0)
        a, timings_a = printer.synthesize(cond, 0)
        b, _ = printer.synthesize(cond, 5)  # different request index, same condition
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert set(timings_a) == {"setup_s", "print_s", "image_s", "read_s"}
        assert all(v >= 0 for v in timings_a.values())
