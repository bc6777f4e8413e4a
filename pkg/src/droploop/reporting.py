"""Exports for inspection: cross-section heatmaps, delta fields, 1-D manifolds.

Figures are PNG heatmaps for eyeballing; every figure gets a sidecar CSV so
tests and downstream tooling never have to parse pixels.
"""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import surrogate
from .ridge_sgd import RidgeModel
from .sampling import ParameterSpace
from .surrogate import AcquisitionField, GpModel

AXIS_PAIRS = ((0, 1), (1, 2), (2, 0))  # pressure x frequency, frequency x speed, speed x pressure


def write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def field_csv(grid_a: np.ndarray, grid_b: np.ndarray, values: np.ndarray, name_a: str, name_b: str) -> str:
    """CSV body with one (dim1, dim2, value) row per grid cell."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([name_a, name_b, "value"])
    for i, a in enumerate(grid_a):
        for j, b in enumerate(grid_b):
            writer.writerow([repr(float(a)), repr(float(b)), repr(float(values[i, j]))])
    return buf.getvalue()


def save_heatmap(
    path: str | Path,
    grid_a: np.ndarray,
    grid_b: np.ndarray,
    values: np.ndarray,
    name_a: str,
    name_b: str,
    title: str,
) -> None:
    """Render a field as a PNG heatmap with the value range in the title."""
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    mesh = ax.pcolormesh(grid_a, grid_b, values.T, shading="auto", cmap="viridis")
    ax.set_xlabel(name_a)
    ax.set_ylabel(name_b)
    ax.set_title(f"{title}\nrange [{values.min():.4g}, {values.max():.4g}]", fontsize=9)
    fig.colorbar(mesh, ax=ax)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def export_acquisition_field(
    out_dir: str | Path,
    field: AcquisitionField,
    update_index: int,
    grid_label: str = "acquisition",
) -> list[Path]:
    """Write the three 2-D cross-sections of one update's EI field."""
    out_dir = Path(out_dir)
    written = []
    for axis_a, axis_b in AXIS_PAIRS:
        name_a = field.space.dims[axis_a].name
        name_b = field.space.dims[axis_b].name
        values = field.cross_section(axis_a, axis_b)
        stem = f"{grid_label}_u{update_index:02d}_{name_a}_{name_b}"
        write_text_atomic(
            out_dir / f"{stem}.csv",
            field_csv(field.grid_raw(axis_a), field.grid_raw(axis_b), values, name_a, name_b),
        )
        save_heatmap(
            out_dir / f"{stem}.png",
            field.grid_raw(axis_a),
            field.grid_raw(axis_b),
            values,
            name_a,
            name_b,
            f"expected improvement, update {update_index}",
        )
        written.extend([out_dir / f"{stem}.csv", out_dir / f"{stem}.png"])
    return written


def gaussian_interpolate(
    sample_x: np.ndarray, sample_y: np.ndarray, grid: np.ndarray, bandwidth: float = 0.1
) -> np.ndarray:
    """Gaussian-kernel weighted mean of sample losses along one axis."""
    d = (grid[:, None] - sample_x[None, :]) / bandwidth
    w = np.exp(-0.5 * d * d)
    denom = w.sum(axis=1)
    # far outside the data the kernel mass vanishes; fall back to the nearest sample
    nearest = sample_y[np.abs(grid[:, None] - sample_x[None, :]).argmin(axis=1)]
    with np.errstate(invalid="ignore", divide="ignore"):
        est = (w @ sample_y) / denom
    return np.where(denom > 1e-300, est, nearest)


def manifold_1d_csv(
    space: ParameterSpace,
    conditions: np.ndarray,
    losses: np.ndarray,
    grid_points: int = 100,
    bandwidth: float = 0.1,
) -> str:
    """Per-dimension 1-D interpolated loss curves, one row per grid point."""
    unit = space.normalize(conditions)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dimension", "value", "interpolated_loss"])
    grid = np.linspace(0.0, 1.0, grid_points)
    for axis, dim in enumerate(space.dims):
        est = gaussian_interpolate(unit[:, axis], losses, grid, bandwidth)
        raw = dim.low + grid * (dim.high - dim.low)
        for v, e in zip(raw, est):
            writer.writerow([dim.name, repr(float(v)), repr(float(e))])
    return buf.getvalue()


def save_manifold_1d_png(
    path: str | Path,
    space: ParameterSpace,
    conditions: np.ndarray,
    losses: np.ndarray,
    grid_points: int = 100,
    bandwidth: float = 0.1,
) -> None:
    unit = space.normalize(conditions)
    best = int(np.argmin(losses))
    grid = np.linspace(0.0, 1.0, grid_points)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5), dpi=100)
    for axis, (dim, ax) in enumerate(zip(space.dims, axes)):
        est = gaussian_interpolate(unit[:, axis], losses, grid, bandwidth)
        raw_grid = dim.low + grid * (dim.high - dim.low)
        ax.plot(raw_grid, est, color="tab:blue", lw=1.5)
        ax.scatter(conditions[:, axis], losses, s=12, color="tab:gray", alpha=0.7)
        ax.scatter(
            [conditions[best, axis]], [losses[best]], s=40, color="black", zorder=5,
            label="best",
        )
        ax.set_xlabel(f"{dim.name} [{dim.unit}]")
        ax.set_ylabel("loss")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def gp_model_to_dict(model: GpModel) -> dict:
    return {
        "optimizer": "bo",
        "space": model.space.to_dict(),
        "train_x": [[float(v) for v in row] for row in model.train_x],
        "train_y": [float(v) for v in model.train_y],
        "lengthscales": [float(v) for v in model.lengthscales],
        "kernel_variance": float(model.kernel_variance),
        "jitter": float(model.jitter),
        "y_center": float(model.y_center),
        "y_scale": float(model.y_scale),
    }


def gp_model_from_dict(data: dict) -> GpModel:
    from scipy.linalg import cho_solve, cholesky

    space = ParameterSpace.from_dict(data["space"])
    train_x = np.array(data["train_x"], dtype=float)
    train_y = np.array(data["train_y"], dtype=float)
    lengthscales = np.array(data["lengthscales"], dtype=float)
    kernel_variance = float(data["kernel_variance"])
    jitter = float(data["jitter"])
    y_center = float(data["y_center"])
    y_scale = float(data["y_scale"])
    k = surrogate.matern52(train_x, train_x, lengthscales, kernel_variance)
    k = np.atleast_2d(k) + jitter * np.eye(len(train_x))
    low = cholesky(k, lower=True)
    alpha = cho_solve((low, True), (train_y - y_center) / y_scale)
    return GpModel(
        space=space,
        train_x=train_x,
        train_y=train_y,
        lengthscales=lengthscales,
        kernel_variance=kernel_variance,
        jitter=jitter,
        y_center=y_center,
        y_scale=y_scale,
        chol_lower=low,
        alpha=alpha,
    )


def save_model(path: str | Path, model) -> None:
    if isinstance(model, GpModel):
        write_text_atomic(path, json.dumps(gp_model_to_dict(model), sort_keys=True) + "\n")
    elif isinstance(model, RidgeModel):
        data = json.loads(model.to_json())
        data["optimizer"] = "sgd"
        write_text_atomic(path, json.dumps(data, sort_keys=True) + "\n")
    else:
        raise TypeError(f"cannot archive model of type {type(model).__name__}")


def load_model(path: str | Path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("optimizer") == "bo":
        return gp_model_from_dict(data)
    if data.get("optimizer") == "sgd":
        return RidgeModel.from_json(json.dumps(data))
    raise ValueError(f"unknown archived model kind in {path}")
