import numpy as np
import pytest

from caffnet.constraints import ComboMode, enumerate_combinations
from caffnet.experiments.solver import (
    N_EQ,
    N_INEQ,
    SolverScenario,
    StackedProgramProvider,
    sample_inputs,
    solver_instance,
)
from caffnet.layer import LayerConfig, SubConstraintTensors, select_batch
from caffnet.linalg import pinv
from caffnet.rngs import make_rng
from caffnet.training import MODE_SOFT, TrainConfig, train


def test_instance_shapes_and_determinism():
    inst = solver_instance(3)
    assert inst.g.shape == (N_INEQ, 5) and inst.c.shape == (N_EQ, 5)
    assert inst.q.shape == (5, 5) and np.all(np.diag(inst.q) >= 0.1)
    assert np.count_nonzero(inst.q - np.diag(np.diag(inst.q))) == 0
    assert np.linalg.matrix_rank(inst.c) == N_EQ
    again = solver_instance(3)
    np.testing.assert_array_equal(inst.g, again.g)
    np.testing.assert_array_equal(inst.h, again.h)


def test_rhs_formula_rowwise_absolute_sum():
    inst = solver_instance(0)
    np.testing.assert_allclose(inst.h, np.abs(inst.g @ pinv(inst.c)).sum(axis=1))


def test_constructed_point_feasible_for_many_inputs():
    inst = solver_instance(1)
    xs = make_rng(0, "feas-check").uniform(-1, 1, size=(10_000, N_EQ))
    ys = xs @ pinv(inst.c).T
    assert (ys @ inst.g.T - inst.h).max() <= 1e-12


def test_stacked_system_encodes_equalities():
    inst = solver_instance(2)
    provider = StackedProgramProvider(inst)
    x = np.array([0.3, -0.5, 0.8])
    sys = provider.system(x)
    assert sys.m == 11 and sys.n_out == 5
    np.testing.assert_array_equal(sys.a_matrix[:5], inst.g)
    np.testing.assert_array_equal(sys.a_matrix[5:8], inst.c)
    np.testing.assert_array_equal(sys.a_matrix[8:], -inst.c)
    np.testing.assert_array_equal(sys.b_vector[5:8], x)
    np.testing.assert_array_equal(sys.b_vector[8:], -x)


def test_unsupervised_loss_value_and_gradient():
    sc = SolverScenario(seed=0, n_train=4, n_test=4)
    y = np.zeros((2, 5))
    loss, grad = sc.loss_and_grad(sc.x_train[:2], y)
    assert loss == 0.0  # sin(0) = 0 and quadratic term vanishes
    y = np.eye(5)[:2] * 1.3
    loss, grad = sc.loss_and_grad(sc.x_train[:2], y)
    h = 1e-6
    for i in range(2):
        for j in range(5):
            yp = y.copy(); yp[i, j] += h
            ym = y.copy(); ym[i, j] -= h
            fd = (sc.loss_and_grad(sc.x_train[:2], yp)[0]
                  - sc.loss_and_grad(sc.x_train[:2], ym)[0]) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_layer_outputs_satisfy_equalities_exactly():
    sc = SolverScenario(seed=0, n_train=16, n_test=16)
    cfg = LayerConfig(mode=ComboMode.LITE)
    combos = enumerate_combinations(11, 5, ComboMode.LITE)
    tensors = SubConstraintTensors(sc.provider.constant_a, combos)
    rng = make_rng(1, "eq-test")
    f = rng.normal(size=(16, 5))
    w = rng.normal(size=(16, 5))
    b = sc.provider.b_batch(sc.x_test)
    sel = select_batch(tensors, b, f, w, cfg)
    eq_resid = np.abs(sel.output @ sc.instance.c.T - sc.x_test)
    assert eq_resid.max() <= 1e-9
    assert (sel.output @ sc.instance.g.T - sc.instance.h).max() <= 1e-9


def test_lite_equals_full_outputs_on_fixed_samples():
    sc = SolverScenario(seed=0, n_train=8, n_test=50)
    rng = make_rng(2, "lite-vs-full")
    f = rng.normal(size=(50, 5))
    w = rng.normal(size=(50, 5))
    b = sc.provider.b_batch(sc.x_test)
    cfg = LayerConfig()
    out = {}
    for mode in (ComboMode.FULL, ComboMode.LITE):
        combos = enumerate_combinations(11, 5, mode)
        tensors = SubConstraintTensors(sc.provider.constant_a, combos)
        out[mode] = select_batch(tensors, b, f, w, LayerConfig(mode=mode)).output
    np.testing.assert_allclose(out[ComboMode.FULL], out[ComboMode.LITE], atol=1e-8)


def test_soft_baseline_training_violates_equalities():
    sc = SolverScenario(seed=0, n_train=32, n_test=32)
    cfg = TrainConfig(epochs=30, batch_size=1000, seed=0, layer_mode=MODE_SOFT,
                      hidden=(16, 16))
    model = sc.build_model(cfg)
    train(model, sc, cfg)
    metrics = sc.evaluate(model, 0)
    assert metrics["eq_frac"] > 0.9
    assert metrics["eq_max"] > 1e-6


def test_input_sampler_bounds_and_streams():
    xs = sample_inputs(0, "train", 100)
    assert xs.shape == (100, 3)
    assert np.all((-1 <= xs) & (xs <= 1))
    assert not np.array_equal(xs, sample_inputs(0, "test", 100))
    np.testing.assert_array_equal(xs, sample_inputs(0, "train", 100))
