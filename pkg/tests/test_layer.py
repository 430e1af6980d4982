import json

import numpy as np
import pytest

from caffnet.constraints import ComboMode, ConstraintSystem, enumerate_combinations
from caffnet.layer import (
    EmptyCandidateSetError,
    LayerConfig,
    SubConstraintTensors,
    backward,
    backward_batch,
    candidates,
    forward,
    project_sub,
    record_to_json,
    select_batch,
    select_batch_varying,
)
from caffnet.oracle import exact_projection
from caffnet.verify import random_feasible_system
from caffnet.rngs import make_rng

CFG = LayerConfig()


def band_system():
    return ConstraintSystem([[1.0], [1.0], [-1.0], [-1.0]], [2.0, 3.0, -1.0, -1.5])


def test_project_sub_scalar_row():
    np.testing.assert_allclose(project_sub([5.0], [0.0], [[2.0]], [4.0]), [2.0])


def test_project_sub_null_space_shift():
    # constraint pins the second coordinate; the shift moves along the first
    out = project_sub([3.0, 5.0], [7.0, 9.0], [[0.0, 1.0]], [0.0])
    np.testing.assert_allclose(out, [10.0, 0.0])


def test_project_sub_invertible_ignores_shift():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    out = project_sub(rng.normal(size=3), rng.normal(size=3), a, b)
    np.testing.assert_allclose(out, np.linalg.solve(a, b), atol=1e-9)


def test_project_sub_rejects_bad_dims():
    with pytest.raises(ValueError):
        project_sub([1.0, 2.0], [0.0, 0.0], [[1.0]], [1.0])


def test_candidates_band_example():
    sys = band_system()
    combos = enumerate_combinations(4, 1)
    cand = candidates(sys, combos, [0.0], [0.0], CFG)
    assert [float(c.y[0]) for c in cand] == [2.0, 3.0, 1.0, 1.5]
    assert [c.feasible for c in cand] == [True, False, False, True]


def test_candidates_chunked_identical():
    rng = make_rng(0, "chunk-test")
    sys, f, w = random_feasible_system(rng)
    combos = enumerate_combinations(sys.m, sys.n_out)
    whole = candidates(sys, combos, f, w, CFG)
    for chunk_size in (1, 2, 7):
        chunked = candidates(sys, combos, f, w, CFG, chunk_size=chunk_size)
        assert len(chunked) == len(whole)
        for a, b in zip(whole, chunked):
            assert a.gamma == b.gamma
            np.testing.assert_array_equal(a.y, b.y)
            assert a.feasible == b.feasible
            assert a.distance == b.distance


def test_candidates_full_selection_consistent_rank():
    # square full-rank selection satisfies its rows with equality
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    y0 = rng.normal(size=2)
    sys = ConstraintSystem(a, a @ y0)
    combos = enumerate_combinations(2, 2)
    cand = {c.gamma: c for c in candidates(sys, combos, [5.0, -3.0], [0.3, 0.1], CFG)}
    full = cand[(1, 2)]
    np.testing.assert_allclose(a @ full.y, sys.b_vector, atol=1e-8)


def test_forward_interior_passthrough():
    sys = band_system()
    combos = enumerate_combinations(4, 1)
    rec = forward(sys, combos, [1.7], [9.0], CFG)
    assert rec.branch == "interior"
    np.testing.assert_array_equal(rec.output, [1.7])


def test_forward_band_selects_nearest():
    sys = band_system()
    combos = enumerate_combinations(4, 1)
    rec = forward(sys, combos, [0.0], [0.0], CFG)
    assert rec.branch == "projected"
    assert rec.gamma == (4,)
    np.testing.assert_allclose(rec.output, [1.5])


def test_forward_square_invertible_recovers_vertex():
    # both rows violated and both single-row projections infeasible, so the
    # full selection wins and the output is exactly A^-1 b
    sys = ConstraintSystem([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    combos = enumerate_combinations(2, 2)
    rec = forward(sys, combos, [1.0, 1.0], [0.7, -0.4], CFG)
    assert rec.branch == "projected"
    assert rec.gamma == (1, 2)
    np.testing.assert_allclose(rec.output, [0.0, 0.0], atol=1e-12)


def test_forward_tie_breaks_lexicographically():
    # two duplicated rows produce identical candidates; the first wins
    sys = ConstraintSystem([[1.0], [1.0]], [1.0, 1.0])
    combos = enumerate_combinations(2, 1)
    rec = forward(sys, combos, [2.0], [0.0], CFG)
    assert rec.gamma == (1,)


def test_forward_empty_candidate_set_raises():
    # infeasible pair y <= 0, -y <= -1
    sys = ConstraintSystem([[1.0], [-1.0]], [0.0, -1.0])
    combos = enumerate_combinations(2, 1)
    with pytest.raises(EmptyCandidateSetError) as err:
        forward(sys, combos, [5.0], [0.0], CFG)
    assert err.value.least_violating is not None


def test_forward_idempotent():
    rng = make_rng(1, "idempotence")
    for _ in range(50):
        sys, f, w = random_feasible_system(rng)
        combos = enumerate_combinations(sys.m, sys.n_out)
        rec = forward(sys, combos, f, w, CFG)
        again = forward(sys, combos, rec.output, w, CFG)
        assert again.branch == "interior"
        np.testing.assert_array_equal(again.output, rec.output)


def test_forward_output_never_farther_than_feasible_candidates():
    rng = make_rng(2, "monotone")
    for _ in range(50):
        sys, f, w = random_feasible_system(rng)
        combos = enumerate_combinations(sys.m, sys.n_out)
        rec = forward(sys, combos, f, w, CFG, keep_candidates=True)
        if rec.branch == "interior":
            continue
        feasible = [c.distance for c in rec.candidates if c.feasible]
        assert rec.distance <= min(feasible) + 1e-12


def test_forward_matches_euclidean_projection_with_zero_shift():
    rng = make_rng(3, "oracle-match")
    for _ in range(60):
        sys, f, _ = random_feasible_system(rng)
        combos = enumerate_combinations(sys.m, sys.n_out)
        rec = forward(sys, combos, f, np.zeros(sys.n_out), CFG)
        orc = exact_projection(sys, f)
        assert orc.converged
        assert np.linalg.norm(rec.output - f) == pytest.approx(orc.objective, abs=1e-6)


def test_backward_interior_passthrough():
    rec = forward(band_system(), enumerate_combinations(4, 1), [1.7], [0.0], CFG)
    gf, gw = backward(rec, [2.5])
    np.testing.assert_array_equal(gf, [2.5])
    np.testing.assert_array_equal(gw, [0.0])


def test_backward_full_rank_kills_gradient():
    rec = forward(band_system(), enumerate_combinations(4, 1), [0.0], [0.0], CFG)
    gf, gw = backward(rec, [3.0])
    np.testing.assert_array_equal(gf, [0.0])
    np.testing.assert_array_equal(gw, [0.0])


def test_backward_projector_shapes_gradient():
    sys = ConstraintSystem([[0.0, 1.0]], [0.0])
    combos = enumerate_combinations(1, 2)
    rec = forward(sys, combos, [3.0, 5.0], [0.0, 0.0], CFG)
    gf, gw = backward(rec, [1.0, 1.0])
    np.testing.assert_allclose(gf, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(gw, [1.0, 0.0], atol=1e-12)


def test_batch_paths_agree_with_single_sample():
    rng = make_rng(4, "batch-agreement")
    a = rng.normal(size=(6, 3))
    combos = enumerate_combinations(6, 3)
    tensors = SubConstraintTensors(a, combos)
    y0 = rng.normal(size=3)
    b = a @ y0 + np.abs(rng.normal(size=6))
    sys = ConstraintSystem(a, b)
    s = 25
    f = rng.normal(size=(s, 3)) * 2
    w = rng.normal(size=(s, 3))
    bb = np.tile(b, (s, 1))
    fixed = select_batch(tensors, bb, f, w, CFG)
    varying = select_batch_varying(np.tile(a, (s, 1, 1)), combos.combos, bb, f, w, CFG)
    for i in range(s):
        rec = forward(sys, combos, f[i], w[i], CFG)
        np.testing.assert_allclose(fixed.output[i], rec.output, atol=1e-10)
        np.testing.assert_allclose(varying.output[i], rec.output, atol=1e-10)
        assert bool(fixed.interior[i]) == (rec.branch == "interior")
    # batched backward agrees with per-sample backward
    upstream = rng.normal(size=(s, 3))
    gf, gw = backward_batch(fixed, upstream)
    for i in range(s):
        rec = forward(sys, combos, f[i], w[i], CFG)
        gfi, gwi = backward(rec, upstream[i])
        np.testing.assert_allclose(gf[i], gfi, atol=1e-10)
        np.testing.assert_allclose(gw[i], gwi, atol=1e-10)


def test_record_dump_lists_candidates():
    sys = band_system()
    combos = enumerate_combinations(4, 1)
    rec = forward(sys, combos, [0.0], [0.0], CFG, keep_candidates=True)
    doc = json.loads(record_to_json(rec))
    assert doc["branch"] == "projected"
    assert doc["gamma"] == [4]
    assert len(doc["candidates"]) == 4
    assert {c["feasible"] for c in doc["candidates"]} == {True, False}


def test_lite_matches_full_when_family_covers_faces():
    # equality pairs let the lite family pad any face to full cardinality
    rng = make_rng(5, "lite-full")
    c = rng.normal(size=(2, 3))
    g = rng.normal(size=(3, 3))
    a = np.vstack([g, c, -c])
    x = rng.normal(size=2) * 0.3
    h = np.abs(g @ np.linalg.pinv(c) @ x) + 1.0
    b = np.concatenate([h, x, -x])
    sys = ConstraintSystem(a, b)
    full = enumerate_combinations(7, 3, ComboMode.FULL)
    lite = enumerate_combinations(7, 3, ComboMode.LITE)
    for _ in range(20):
        f = rng.normal(size=3)
        w = rng.normal(size=3)
        out_full = forward(sys, full, f, w, CFG).output
        out_lite = forward(sys, lite, f, w, CFG).output
        np.testing.assert_allclose(out_full, out_lite, atol=1e-8)
