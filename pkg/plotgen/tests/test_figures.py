import json
from pathlib import Path

import numpy as np
import pytest

from plotgen.figures import (
    FigureSpec,
    SchemaError,
    check_trajectory_consistency,
    read_csv_columns,
    render,
    specs_from_index,
)


def write_csv(path: Path, header: list[str], rows):
    lines = ["# manifest deadbeef", ",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def function_bundle(tmp_path):
    xs = np.linspace(-2, 2, 40)
    write_csv(tmp_path / "function.csv",
              ["x", "target", "prediction", "g1_up", "g2_up", "g1_lo", "g2_lo"],
              [(x, np.sin(x), np.sin(x) + 0.05, 2.0, 2.5, -2.0, -2.5) for x in xs])
    write_csv(tmp_path / "points.csv", ["x", "target"],
              [(x, np.sin(x)) for x in xs[::5]])
    return tmp_path


@pytest.fixture
def trajectory_bundle(tmp_path):
    rows = []
    for k in range(30):
        t = 0.1 * k
        px, py = -4.0 + 0.1 * k, 1.5   # passes above the obstacle box
        rows.append((t, px, py, 0.0, 0.5, 0.1, 0.4, 0.0, 0.1, 0.1) + (0.0,) * 13)
    header = (["t", "p_x", "p_y", "theta", "v", "omega",
               "v_nom", "omega_nom", "v_net", "omega_net"]
              + [f"r_{i}" for i in range(13)])
    write_csv(tmp_path / "trajectory.csv", header, rows)
    geometry = {
        "obstacles": [
            {"A": [[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]],
             "b": [-1.0, 2.0, 1.0, 1.0]},
        ],
        "state_box": {"A": [[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]],
                      "b": [1.0, 5.0, 2.0, 4.0]},
        "goal": [0.0, 0.0],
        "goal_radius": 0.1,
        "command_bounds": {"lo": [-0.01, -0.5], "hi": [1.0, 0.5]},
    }
    (tmp_path / "geometry.json").write_text(json.dumps(geometry))
    return tmp_path


def test_read_csv_skips_comments_and_validates(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], [(1, 2), (3, 4)])
    cols = read_csv_columns(tmp_path / "x.csv", ("a", "b"))
    np.testing.assert_array_equal(cols["a"], [1.0, 3.0])
    with pytest.raises(SchemaError):
        read_csv_columns(tmp_path / "x.csv", ("a", "missing"))


def test_empty_csv_errors_no_image(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    spec = FigureSpec(kind="loss", inputs={"csv": tmp_path / "empty.csv"},
                      out_path=tmp_path / "loss.png")
    with pytest.raises(SchemaError):
        render(spec)
    assert not (tmp_path / "loss.png").exists()


def test_function_figure_renders(function_bundle, tmp_path):
    spec = FigureSpec(kind="function",
                      inputs={"csv": function_bundle / "function.csv",
                              "points_csv": function_bundle / "points.csv"},
                      out_path=tmp_path / "function.png")
    out = render(spec)
    assert out.exists() and out.stat().st_size > 2000


def test_loss_figure_renders(tmp_path):
    rows = [(seed, epoch, 10.0 / (epoch + 1), 0.0, 0.0)
            for seed in (0, 1) for epoch in range(20)]
    write_csv(tmp_path / "loss.csv",
              ["seed", "epoch", "loss", "max_violation", "mean_violation"], rows)
    spec = FigureSpec(kind="loss", inputs={"csv": tmp_path / "loss.csv"},
                      out_path=tmp_path / "loss.png")
    assert render(spec).exists()


def test_trajectory_and_controls_render(trajectory_bundle, tmp_path):
    for kind in ("trajectory", "controls"):
        spec = FigureSpec(kind=kind,
                          inputs={"csv": trajectory_bundle / "trajectory.csv",
                                  "geometry_json": trajectory_bundle / "geometry.json"},
                          out_path=tmp_path / f"{kind}.png")
        assert render(spec).exists()


def test_render_deterministic_bytes(function_bundle, tmp_path):
    outs = []
    for name in ("one.png", "two.png"):
        spec = FigureSpec(kind="function",
                          inputs={"csv": function_bundle / "function.csv"},
                          out_path=tmp_path / name)
        outs.append(render(spec).read_bytes())
    assert outs[0] == outs[1]


def test_trajectory_consistency_crosscheck(trajectory_bundle):
    spec = FigureSpec(kind="trajectory",
                      inputs={"csv": trajectory_bundle / "trajectory.csv",
                              "geometry_json": trajectory_bundle / "geometry.json"},
                      out_path=trajectory_bundle / "t.png")
    assert check_trajectory_consistency(spec) == 30


def test_trajectory_consistency_detects_contradiction(tmp_path, trajectory_bundle):
    # a zero-residual point placed inside the obstacle must be flagged
    header = (["t", "p_x", "p_y", "theta", "v", "omega",
               "v_nom", "omega_nom", "v_net", "omega_net"]
              + [f"r_{i}" for i in range(13)])
    write_csv(tmp_path / "bad.csv", header, [(0.0, -1.5, 0.0, 0, 0, 0, 0, 0, 0, 0) + (0.0,) * 13])
    spec = FigureSpec(kind="trajectory",
                      inputs={"csv": tmp_path / "bad.csv",
                              "geometry_json": trajectory_bundle / "geometry.json"},
                      out_path=tmp_path / "t.png")
    with pytest.raises(AssertionError):
        check_trajectory_consistency(spec)


def test_specs_from_index(tmp_path, function_bundle):
    index = {"manifest": "cafe", "scenario": "piecewise",
             "figures": {"function": {"csv": "function.csv",
                                      "points_csv": "points.csv"}}}
    (function_bundle / "index.json").write_text(json.dumps(index))
    specs = specs_from_index(function_bundle / "index.json", tmp_path / "figs")
    assert len(specs) == 1
    assert specs[0].kind == "function"
    assert render(specs[0]).exists()


def test_missing_input_raises_schema_error(tmp_path):
    with pytest.raises(SchemaError):
        FigureSpec(kind="loss", inputs={"csv": tmp_path / "nope.csv"},
                   out_path=tmp_path / "x.png")
