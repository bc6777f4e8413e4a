"""Command-line front end.

Verbs: ``init`` (LHS plan CSV), ``score`` (loss report for images), ``run``
(one closed-loop run), ``compare`` (both optimizers on identical seeds),
``report`` (acquisition / loss-delta / 1-D manifold exports from a run
directory). Exit codes: 0 success, 1 partial data errors, 2 config errors,
3 missing-state errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import loop as loop_mod
from . import reporting, surrogate
from .errors import ConfigError, DroploopError, ImageFormatError, MissingStateError
from .loop import ConvergencePolicy, LoopAborted, RunLedger
from .printer import ReplayPrinter, SimPrinterConfig, SimulatedPrinter, load_png, save_png, Raster
from .ridge_sgd import DEFAULT_EPOCHS, DEFAULT_LAMBDAS, DEFAULT_LR, DEFAULT_TOL
from .sampling import ParameterSpace, PrintConditions, lhs_sample
from .vision import LossWeights, SegmentationParams, overlay_rgb, score_image, segment

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

CONFIG_SCHEMA_VERSION = 1
OUTPUT_ENV_VAR = "DROPLOOP_OUT"

TIMING_TABLE_ROWS = (
    ("read_images", "read_s"),
    ("compute_score", "score_s"),
    ("train_model", "train_s"),
    ("printer_set_up", "setup_s"),
    ("print_droplets", "print_s"),
    ("image_droplets", "image_s"),
)


class RunConfig:
    """Resolved run configuration (single JSON document, schema v1)."""

    def __init__(self, data: dict):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        try:
            self.space = (
                ParameterSpace.from_dict(data["space"]) if "space" in data else ParameterSpace()
            )
            w = data.get("weights", {})
            self.weights = LossWeights(
                geometric=float(w.get("geometric", 1.0)), yield_=float(w.get("yield", 1.0))
            )
            self.optimizer = data.get("optimizer", "bo")
            if self.optimizer not in ("bo", "sgd"):
                raise ConfigError(f"optimizer must be 'bo' or 'sgd', got {self.optimizer!r}")
            self.backend = dict(data.get("backend", {"kind": "sim"}))
            kind = self.backend.get("kind", "sim")
            if kind not in ("sim", "replay"):
                raise ConfigError(f"backend kind must be 'sim' or 'replay', got {kind!r}")
            p = data.get("policy", {})
            self.policy = ConvergencePolicy(
                tol=float(p.get("tol", 1e-3)),
                repeats=int(p.get("repeats", 2)),
                max_updates=int(p.get("max_updates", 10)),
            )
            self.init_n = int(data.get("init", {}).get("n", 12))
            s = data.get("segmentation", {})
            self.segmentation = SegmentationParams(
                droplets_dark=bool(s.get("droplets_dark", True)),
                opening_size=int(s.get("opening_size", 3)),
                opening_iterations=int(s.get("opening_iterations", 1)),
                marker_rel_threshold=float(s.get("marker_rel_threshold", 0.4)),
                min_area=int(s.get("min_area", 5)),
            )
            self.bo = dict(data.get("bo", {}))
            self.sgd = dict(data.get("sgd", {}))
            self.seed = int(data.get("seed", 0))
            self.out_dir = data.get("out_dir")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def resolved_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "space": self.space.to_dict(),
            "weights": {"geometric": self.weights.geometric, "yield": self.weights.yield_},
            "optimizer": self.optimizer,
            "backend": self.backend,
            "policy": {
                "tol": self.policy.tol,
                "repeats": self.policy.repeats,
                "max_updates": self.policy.max_updates,
            },
            "init": {"n": self.init_n},
            "segmentation": {
                "droplets_dark": self.segmentation.droplets_dark,
                "opening_size": self.segmentation.opening_size,
                "opening_iterations": self.segmentation.opening_iterations,
                "marker_rel_threshold": self.segmentation.marker_rel_threshold,
                "min_area": self.segmentation.min_area,
            },
            "bo": self.bo,
            "sgd": self.sgd,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def make_backend(self):
        kind = self.backend.get("kind", "sim")
        if kind == "sim":
            cfg = SimPrinterConfig(
                canvas=tuple(self.backend.get("canvas", (400, 400))),
                scan_rows=int(self.backend.get("scan_rows", 10)),
                px_per_mm=float(self.backend.get("px_per_mm", 10.0)),
                flow_coeff=float(self.backend.get("flow_coeff", 2000.0)),
                jitter_coeff=float(self.backend.get("jitter_coeff", 0.001)),
                seed=self.seed,
                setup_delay_s=float(self.backend.get("setup_delay_s", 0.0)),
                print_delay_s=float(self.backend.get("print_delay_s", 0.0)),
                image_delay_s=float(self.backend.get("image_delay_s", 0.0)),
            )
            return SimulatedPrinter(cfg)
        inbox = self.backend.get("inbox")
        if not inbox:
            raise ConfigError("replay backend requires an 'inbox' directory")
        return ReplayPrinter(inbox, timeout=float(self.backend.get("timeout_s", 300.0)))

    def optimizer_settings(self, optimizer: str) -> dict:
        return dict(self.bo if optimizer == "bo" else self.sgd)


def resolve_out_dir(cli_out: str | None, cfg: RunConfig | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get(OUTPUT_ENV_VAR)
    if env:
        return Path(env)
    return Path("runs")


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------- commands


def cmd_init(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = resolve_out_dir(args.out, cfg)
    conditions = lhs_sample(cfg.space, cfg.init_n, seed=cfg.seed)
    rows = [["sample", "pressure_mpa", "frequency_hz", "speed_mm_s"]]
    for i, c in enumerate(conditions, start=1):
        rows.append([str(i), _fmt(c.pressure), _fmt(c.frequency), _fmt(c.speed)])
    path = out_dir / "init_plan.csv"
    reporting.write_text_atomic(path, _csv_text(rows))
    print(path)
    return EXIT_OK


def cmd_score(args) -> int:
    if args.config:
        cfg = RunConfig.from_file(args.config)
        weights, seg_params = cfg.weights, cfg.segmentation
    else:
        weights, seg_params = LossWeights(), SegmentationParams()

    target = Path(args.target)
    if target.is_dir():
        files = sorted(target.glob("*.png"))
    elif target.exists():
        files = [target]
    else:
        raise ConfigError(f"no such image or directory: {target}")

    rows = [["image", "geometric", "yield", "combined", "error"]]
    failed = 0
    for f in files:
        try:
            raster = load_png(f)
            score = score_image(raster, seg_params, weights)
            rows.append([f.name, _fmt(score.geometric), _fmt(score.yield_), _fmt(score.combined), ""])
            if args.overlay_dir:
                seg = segment(raster, seg_params)
                from PIL import Image

                overlay_path = Path(args.overlay_dir) / f"{f.stem}_overlay.png"
                overlay_path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(overlay_rgb(raster, seg), mode="RGB").save(overlay_path)
        except (ImageFormatError, OSError) as exc:
            failed += 1
            rows.append([f.name, "", "", "", str(exc)])
    text = _csv_text(rows)
    if args.out:
        reporting.write_text_atomic(args.out, text)
        print(args.out)
    else:
        sys.stdout.write(text)
    return EXIT_PARTIAL if failed else EXIT_OK


def _persist_run(run_dir: Path, cfg: RunConfig, ledger: RunLedger, partial: bool) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_text_atomic(
        run_dir / "config.json", json.dumps(cfg.resolved_dict(), sort_keys=True, indent=2) + "\n"
    )
    reporting.write_text_atomic(run_dir / "ledger.jsonl", ledger.to_jsonl())
    timings = ledger.timings_jsonl()
    if timings:
        reporting.write_text_atomic(run_dir / "timings.jsonl", timings)

    models_dir = run_dir / "models"
    for update_index, model in ledger.models.items():
        models_dir.mkdir(parents=True, exist_ok=True)
        reporting.save_model(models_dir / f"update_{update_index:04d}.json", model)

    images_dir = run_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ledger.init_samples):
        save_png(s.image, images_dir / f"init_{i:03d}.png")
    for u in ledger.updates:
        sample = next(s for s in ledger.samples if s.update_index == u.update_index and s.origin == "suggested")
        save_png(sample.image, images_dir / f"update_{u.update_index:03d}.png")

    rows = [["sample", "pressure_mpa", "frequency_hz", "speed_mm_s"]]
    for i, s in enumerate(ledger.init_samples, start=1):
        c = s.conditions
        rows.append([str(i), _fmt(c.pressure), _fmt(c.frequency), _fmt(c.speed)])
    reporting.write_text_atomic(run_dir / "init_conditions.csv", _csv_text(rows))

    rows = [["kind", "index", "pressure_mpa", "frequency_hz", "speed_mm_s", "geometric", "yield", "combined"]]
    for i, s in enumerate(ledger.init_samples):
        c = s.conditions
        rows.append(["init", str(i), _fmt(c.pressure), _fmt(c.frequency), _fmt(c.speed),
                     _fmt(s.score.geometric), _fmt(s.score.yield_), _fmt(s.score.combined)])
    for s in (x for x in ledger.samples if x.origin == "suggested"):
        c = s.conditions
        rows.append(["update", str(s.update_index), _fmt(c.pressure), _fmt(c.frequency), _fmt(c.speed),
                     _fmt(s.score.geometric), _fmt(s.score.yield_), _fmt(s.score.combined)])
    reporting.write_text_atomic(run_dir / "scores.csv", _csv_text(rows))

    summary = {
        "partial": partial,
        "optimizer": ledger.optimizer,
        "seed": ledger.seed,
        "converged": ledger.converged,
        "converged_update": ledger.converged_update,
        "first_suggestion_update": ledger.first_suggestion_update,
        "updates": len(ledger.updates),
        "total_samples": len(ledger.samples),
    }
    if ledger.updates:
        summary["final_suggestion"] = ledger.final_suggestion.to_dict()
        summary["final_predicted_loss"] = ledger.updates[-1].predicted_loss
        summary["final_actual_loss"] = ledger.updates[-1].actual_loss
        summary["prediction_rmse"] = loop_mod.prediction_rmse(ledger)
        summary["final_update_rmse"] = loop_mod.prediction_rmse(ledger, final_only=True)
    if ledger.samples:
        best = ledger.best_sample()
        summary["best_conditions"] = best.conditions.to_dict()
        summary["best_loss"] = best.score.combined
    reporting.write_text_atomic(
        run_dir / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )

    # measured wall-clock table; inherently not byte-reproducible across runs
    means = ledger.mean_timings()
    rows = [["step", "mean_seconds"]]
    for label, key in TIMING_TABLE_ROWS:
        rows.append([label, _fmt(means[key])])
    per_update = sum(means.values())
    rows.append(["total_per_update", _fmt(per_update)])
    rows.append(["total_for_convergence", _fmt(per_update * len(ledger.updates))])
    reporting.write_text_atomic(run_dir / "timing_table.csv", _csv_text(rows))


def _execute_run(cfg: RunConfig, optimizer: str, out_root: Path) -> tuple[Path, RunLedger | None, int]:
    run_dir = out_root / f"{optimizer}-seed{cfg.seed}-{cfg.config_hash()[:8]}"
    backend = cfg.make_backend()
    try:
        ledger = loop_mod.run(
            optimizer,
            backend,
            cfg.space,
            cfg.init_n,
            cfg.weights,
            cfg.policy,
            cfg.seed,
            seg_params=cfg.segmentation,
            optimizer_settings=cfg.optimizer_settings(optimizer),
        )
    except LoopAborted as exc:
        _persist_run(run_dir, cfg, exc.ledger, partial=True)
        print(f"run aborted: {exc}", file=sys.stderr)
        print(run_dir)
        return run_dir, None, EXIT_PARTIAL
    _persist_run(run_dir, cfg, ledger, partial=False)
    print(run_dir)
    return run_dir, ledger, EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_root = resolve_out_dir(args.out, cfg)
    _, _, code = _execute_run(cfg, cfg.optimizer, out_root)
    return code


def cmd_compare(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_root = resolve_out_dir(args.out, cfg)

    results = {}
    for optimizer in ("bo", "sgd"):
        run_dir, ledger, code = _execute_run(cfg, optimizer, out_root)
        if code != EXIT_OK:
            return code
        results[optimizer] = (run_dir, ledger)

    rows = [["optimizer", "converged", "updates", "total_samples", "prediction_rmse", "final_update_rmse"]]
    timing_rows = [["optimizer", "mean_train_s", "mean_score_s", "total_s"]]
    for optimizer, (run_dir, ledger) in results.items():
        rows.append(
            [
                optimizer,
                str(ledger.converged).lower(),
                str(len(ledger.updates)),
                str(len(ledger.samples)),
                _fmt(loop_mod.prediction_rmse(ledger)),
                _fmt(loop_mod.prediction_rmse(ledger, final_only=True)),
            ]
        )
        means = ledger.mean_timings()
        total = sum(sum(u.timings.values()) for u in ledger.updates)
        timing_rows.append([optimizer, _fmt(means["train_s"]), _fmt(means["score_s"]), _fmt(total)])
    reporting.write_text_atomic(out_root / "comparison.csv", _csv_text(rows))
    reporting.write_text_atomic(out_root / "comparison_timings.csv", _csv_text(timing_rows))
    sys.stdout.write(_csv_text(rows))
    print(out_root / "comparison.csv")
    return EXIT_OK


def _read_ledger(run_dir: Path) -> tuple[ParameterSpace, np.ndarray, np.ndarray, list[dict]]:
    ledger_path = run_dir / "ledger.jsonl"
    if not ledger_path.exists():
        raise MissingStateError(f"no ledger at {ledger_path}")
    space = None
    conditions, losses, updates = [], [], []
    for line in ledger_path.read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        kind = record.get("kind")
        if kind == "header":
            space = ParameterSpace.from_dict(record["space"])
        elif kind == "init":
            conditions.append(PrintConditions.from_dict(record["conditions"]).as_array())
            losses.append(record["combined"])
        elif kind == "update":
            conditions.append(PrintConditions.from_dict(record["suggestion"]).as_array())
            losses.append(record["actual_loss"])
            updates.append(record)
    if space is None:
        raise MissingStateError(f"ledger at {ledger_path} has no header")
    return space, np.array(conditions), np.array(losses), updates


def _load_models(run_dir: Path) -> dict[int, object]:
    models_dir = run_dir / "models"
    if not models_dir.is_dir():
        raise MissingStateError(f"no archived models under {models_dir}")
    models = {}
    for path in sorted(models_dir.glob("update_*.json")):
        index = int(path.stem.split("_")[1])
        models[index] = reporting.load_model(path)
    if not models:
        raise MissingStateError(f"no archived models under {models_dir}")
    return models


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    space, conditions, losses, updates = _read_ledger(run_dir)
    out_dir = Path(args.out) if args.out else run_dir / "reports"
    grid = (args.grid, args.grid, args.grid)

    if args.kind == "acquisition":
        models = _load_models(run_dir)
        n_init = len(losses) - len(updates)
        for update_index, model in sorted(models.items()):
            if not isinstance(model, surrogate.GpModel):
                raise MissingStateError(
                    "acquisition report needs archived surrogate models (run the bo optimizer)"
                )
            known = losses[: n_init + update_index - 1]
            field = surrogate.acquisition_field(model, float(known.min()), space, grid)
            reporting.export_acquisition_field(out_dir, field, update_index)
    elif args.kind == "loss_delta":
        models = _load_models(run_dir)
        ledger = RunLedger(
            optimizer="report",
            seed=0,
            space=space,
            weights=LossWeights(),
            policy=ConvergencePolicy(),
        )
        ledger.models = models
        indices = sorted(models)
        for a, b in zip(indices, indices[1:]):
            for axis_a, axis_b in reporting.AXIS_PAIRS:
                ga, gb, values = loop_mod.loss_delta_field(ledger, a, b, axis_a, axis_b, grid)
                name_a, name_b = space.dims[axis_a].name, space.dims[axis_b].name
                stem = f"loss_delta_u{a:02d}_u{b:02d}_{name_a}_{name_b}"
                reporting.write_text_atomic(
                    out_dir / f"{stem}.csv", reporting.field_csv(ga, gb, values, name_a, name_b)
                )
                reporting.save_heatmap(
                    out_dir / f"{stem}.png", ga, gb, values, name_a, name_b,
                    f"|loss delta|, update {a} to {b}",
                )
    elif args.kind == "manifold1d":
        reporting.write_text_atomic(
            out_dir / "manifold1d.csv",
            reporting.manifold_1d_csv(space, conditions, losses, grid_points=args.grid),
        )
        reporting.save_manifold_1d_png(
            out_dir / "manifold1d.png", space, conditions, losses, grid_points=args.grid
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown report kind {args.kind!r}")
    print(out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="droploop",
        description="Closed-loop preconditioning of inkjet printing conditions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="write the LHS initialization plan CSV")
    p_init.add_argument("--config", required=True)
    p_init.add_argument("--seed", type=int)
    p_init.add_argument("--out")
    p_init.set_defaults(func=cmd_init)

    p_score = sub.add_parser("score", help="score a PNG image or a directory of PNGs")
    p_score.add_argument("target")
    p_score.add_argument("--config")
    p_score.add_argument("--out")
    p_score.add_argument("--overlay-dir")
    p_score.set_defaults(func=cmd_score)

    p_run = sub.add_parser("run", help="execute one closed-loop run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run both optimizers on identical seeds")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--seed", type=int)
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="emit figures and CSVs from a run directory")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("--kind", required=True, choices=("acquisition", "loss_delta", "manifold1d"))
    p_rep.add_argument("--grid", type=int, default=30)
    p_rep.add_argument("--out")
    p_rep.set_defaults(func=cmd_report)
    return parser


def load_training_csv(path: str | Path) -> list[tuple[PrintConditions, float]]:
    """Read a scored-conditions CSV (sample,pressure_mpa,frequency_hz,speed_mm_s,score)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            cond = PrintConditions(
                pressure=float(record["pressure_mpa"]),
                frequency=float(record["frequency_hz"]),
                speed=float(record["speed_mm_s"]),
            )
            rows.append((cond, float(record["score"])))
    return rows


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingStateError as exc:
        print(f"missing state: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DroploopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
