"""Figure rendering from exported CSV bundles.

Input is the index.json written by the training CLI's export step; each
figure kind reads only the documented CSV/JSON schemas.  Output images are
deterministic for identical inputs (fixed size, no timestamps).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .geometry import halfspaces_to_polygon  # noqa: E402

FIGURE_KINDS = ("function", "loss", "trajectory", "controls")


class SchemaError(ValueError):
    """A bundle file does not match the documented schema."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: dict[str, Path]
    out_path: Path
    dpi: int = 130

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}")
        for key, path in self.inputs.items():
            if not Path(path).exists():
                raise SchemaError(f"{self.kind}: missing input {key} at {path}")


def read_csv_columns(path, required: tuple[str, ...]) -> dict[str, np.ndarray]:
    """CSV to float column arrays; '#' comment lines are skipped."""
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        rows = list(reader)
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    return {name: data[:, i] for i, name in enumerate(header)}


def load_index(index_path) -> dict:
    index_path = Path(index_path)
    with open(index_path) as fh:
        doc = json.load(fh)
    if "figures" not in doc:
        raise SchemaError(f"{index_path}: no 'figures' table")
    return doc


def specs_from_index(index_path, out_dir) -> list[FigureSpec]:
    index_path = Path(index_path)
    out_dir = Path(out_dir)
    doc = load_index(index_path)
    base = index_path.parent
    specs = []
    for kind, files in doc["figures"].items():
        inputs = {key: base / name for key, name in files.items()}
        specs.append(FigureSpec(kind=kind, inputs=inputs,
                                out_path=out_dir / f"{kind}.png"))
    return specs


def render(spec: FigureSpec) -> Path:
    """Render one figure; raises SchemaError rather than emitting a blank."""
    fig = _RENDERERS[spec.kind](spec)
    spec.out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out_path, dpi=spec.dpi, metadata={"Software": "plotgen"})
    plt.close(fig)
    return spec.out_path


def _render_function(spec: FigureSpec):
    cols = read_csv_columns(spec.inputs["csv"],
                            ("x", "target", "prediction",
                             "g1_up", "g2_up", "g1_lo", "g2_lo"))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    x = cols["x"]
    for name, style in (("g1_up", "--"), ("g2_up", "--"),
                        ("g1_lo", ":"), ("g2_lo", ":")):
        ax.plot(x, cols[name], style, color="gray", linewidth=1.0, label=name)
    ax.plot(x, cols["target"], color="black", linewidth=1.2, label="target")
    ax.plot(x, cols["prediction"], color="tab:red", linewidth=1.4, label="learned")
    if "points_csv" in spec.inputs:
        pts = read_csv_columns(spec.inputs["points_csv"], ("x", "target"))
        ax.plot(pts["x"], pts["target"], "o", color="tab:blue",
                markersize=3, label="train points")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return fig


def _render_loss(spec: FigureSpec):
    cols = read_csv_columns(spec.inputs["csv"], ("seed", "epoch", "loss"))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for seed in np.unique(cols["seed"]):
        mask = cols["seed"] == seed
        ax.plot(cols["epoch"][mask], cols["loss"][mask],
                linewidth=1.0, label=f"seed {int(seed)}")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _residual_columns(cols: dict[str, np.ndarray]) -> np.ndarray:
    names = sorted((c for c in cols if c.startswith("r_")),
                   key=lambda c: int(c.split("_")[1]))
    if not names:
        raise SchemaError("trajectory csv has no residual columns")
    return np.column_stack([cols[c] for c in names])


def _render_trajectory(spec: FigureSpec):
    cols = read_csv_columns(spec.inputs["csv"], ("t", "p_x", "p_y", "theta"))
    with open(spec.inputs["geometry_json"]) as fh:
        geometry = json.load(fh)
    fig, ax = plt.subplots(figsize=(5.2, 5.2))
    for obstacle in geometry["obstacles"]:
        poly = halfspaces_to_polygon(obstacle["A"], obstacle["b"])
        ax.fill(poly[:, 0], poly[:, 1], color="lightgray", edgecolor="dimgray")
    box = halfspaces_to_polygon(geometry["state_box"]["A"], geometry["state_box"]["b"])
    closed = np.vstack([box, box[:1]])
    ax.plot(closed[:, 0], closed[:, 1], color="black", linewidth=1.0)
    goal = plt.Circle(geometry["goal"], geometry["goal_radius"],
                      color="tab:green", alpha=0.4)
    ax.add_patch(goal)
    residuals = _residual_columns(cols)
    clean = residuals.max(axis=1) <= 1e-9
    ax.plot(cols["p_x"], cols["p_y"], color="tab:red", linewidth=1.3)
    ax.plot(cols["p_x"][~clean], cols["p_y"][~clean], "x", color="tab:orange",
            markersize=4, label="violating step")
    ax.plot(cols["p_x"][:1], cols["p_y"][:1], "s", color="tab:blue", label="start")
    ax.set_aspect("equal")
    ax.set_xlabel("p_x [m]")
    ax.set_ylabel("p_y [m]")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return fig


def _render_controls(spec: FigureSpec):
    cols = read_csv_columns(spec.inputs["csv"], ("t", "v", "omega"))
    with open(spec.inputs["geometry_json"]) as fh:
        geometry = json.load(fh)
    lo = geometry["command_bounds"]["lo"]
    hi = geometry["command_bounds"]["hi"]
    fig, axes = plt.subplots(2, 1, figsize=(6.0, 4.4), sharex=True)
    for ax, name, idx in ((axes[0], "v", 0), (axes[1], "omega", 1)):
        ax.plot(cols["t"], cols[name], color="tab:red", linewidth=1.2)
        if f"{name}_nom" in cols:
            ax.plot(cols["t"], cols[f"{name}_nom"], color="tab:blue",
                    linewidth=0.9, label="nominal")
        ax.axhline(lo[idx], color="gray", linestyle="--", linewidth=0.8)
        ax.axhline(hi[idx], color="gray", linestyle="--", linewidth=0.8)
        ax.set_ylabel(name)
        ax.legend(fontsize=7, loc="upper right")
    axes[1].set_xlabel("t [s]")
    fig.tight_layout()
    return fig


_RENDERERS = {
    "function": _render_function,
    "loss": _render_loss,
    "trajectory": _render_trajectory,
    "controls": _render_controls,
}


def check_trajectory_consistency(spec: FigureSpec, tol: float = 1e-9) -> int:
    """Cross-check the trajectory against the geometry: every step whose
    logged residuals are all <= tol must lie outside every obstacle polygon.
    Returns the number of points checked."""
    cols = read_csv_columns(spec.inputs["csv"], ("p_x", "p_y"))
    with open(spec.inputs["geometry_json"]) as fh:
        geometry = json.load(fh)
    residuals = _residual_columns(cols)
    clean = residuals.max(axis=1) <= tol
    pos = np.column_stack([cols["p_x"], cols["p_y"]])[clean]
    for obstacle in geometry["obstacles"]:
        a = np.asarray(obstacle["A"], dtype=float)
        b = np.asarray(obstacle["b"], dtype=float)
        inside = np.all(pos @ a.T <= b[None, :] - 1e-12, axis=1)
        if inside.any():
            bad = pos[inside][0]
            raise AssertionError(f"clean trajectory point {bad} lies inside an obstacle")
    return int(clean.sum())
