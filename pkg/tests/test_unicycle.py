import numpy as np
import pytest

from caffnet.constraints import violation
from caffnet.experiments.unicycle import (
    A_CMD,
    B_CMD,
    GOAL_RADIUS,
    OBSTACLES,
    PidController,
    TEST_START,
    UnicycleScenario,
    cbf_constraints,
    cbf_rhs_jacobian,
    cbf_rows_batch,
    motion_matrix,
    rollout,
    rollout_backward,
    smooth_union,
    training_starts,
)
from caffnet.rngs import make_rng
from caffnet.training import MODE_CAFFNET, MODE_SOFT, TrainConfig, train


def test_smooth_union_equal_inputs_is_exact():
    h, lam = smooth_union(np.full(4, 0.37))
    assert h == pytest.approx(0.37, abs=1e-12)
    np.testing.assert_allclose(lam, np.ones(4))


def test_smooth_union_dominant_input_limit():
    rows = np.array([5.0, -1.0, -2.0])
    h, _ = smooth_union(rows, kappa=10.0)
    assert h == pytest.approx(5.0 - np.log(3) / 10.0, abs=1e-6)


def test_smooth_union_weights_sum_to_row_count():
    rng = make_rng(0, "lse")
    for _ in range(50):
        rows = rng.normal(size=int(rng.integers(2, 7))) * 3
        h, lam = smooth_union(rows)
        assert lam.sum() == pytest.approx(len(rows), rel=1e-12)
        assert h <= rows.max() + 1e-12


def test_smooth_union_under_approximates_max_on_grid():
    xs, ys = np.meshgrid(np.linspace(-5, 1, 100), np.linspace(-4, 2, 100))
    pos = np.column_stack([xs.ravel(), ys.ravel()])
    for a_j, b_j in OBSTACLES:
        edge = pos @ a_j.T - b_j
        h, _ = smooth_union(edge)
        assert np.all(h <= edge.max(axis=1) + 1e-12)


def test_cbf_system_shape_and_command_rows():
    sys = cbf_constraints(TEST_START)
    assert sys.m == 13 and sys.n_out == 2
    np.testing.assert_array_equal(sys.a_matrix[9:], A_CMD)
    np.testing.assert_array_equal(sys.b_vector[9:], B_CMD)


def test_cbf_interior_state_allows_zero_command():
    # far from obstacles and bounds, u = 0 leaves slack equal to b >= 0
    sys = cbf_constraints(np.array([-4.0, -3.0, 0.3]))
    r = violation(sys, np.zeros(2))
    np.testing.assert_array_equal(r, np.zeros(13))
    assert sys.b_vector[:9].min() > 0


def test_cbf_obstacle_row_is_weighted_heading_projection():
    state = np.array([-2.0, 0.5, 0.7])
    sys = cbf_constraints(state)
    a_j, b_j = OBSTACLES[0]
    edge = state[:2] @ a_j.T - b_j
    h, lam = smooth_union(edge)
    lg_v = float(lam @ (a_j[:, 0] * np.cos(0.7) + a_j[:, 1] * np.sin(0.7)))
    assert sys.a_matrix[0, 0] == pytest.approx(-lg_v)
    assert sys.a_matrix[0, 1] == 0.0
    assert sys.b_vector[0] == pytest.approx(h)


def test_cbf_state_rows_wrap_motion_matrix():
    state = np.array([0.5, -1.0, 1.2])
    sys = cbf_constraints(state)
    g = motion_matrix(np.float64(1.2))
    np.testing.assert_allclose(sys.a_matrix[3:9], np.array([
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1.0],
    ]) @ g)


def test_rhs_jacobian_matches_finite_differences():
    rng = make_rng(1, "jac")
    for _ in range(10):
        x = np.array([rng.uniform(-4.5, 0.5), rng.uniform(-3.5, 1.5), rng.uniform(-3, 3)])
        jac = cbf_rhs_jacobian(x[None, :])[0]
        h = 1e-7
        for d in range(3):
            dx = np.zeros(3)
            dx[d] = h
            _, b_hi = cbf_rows_batch((x + dx)[None, :])
            _, b_lo = cbf_rows_batch((x - dx)[None, :])
            np.testing.assert_allclose(jac[:, d], (b_hi[0] - b_lo[0]) / (2 * h),
                                       atol=1e-5)


def test_pid_enters_goal_disk_without_obstacles():
    # arrival = entering the goal disk at some step (the integral term then
    # overshoots, which is expected for these gains)
    pid = PidController(1)
    x = np.array([[-2.0, 0.0, 0.0]])
    closest = np.inf
    for _ in range(300):
        u = pid.command(x)
        assert np.all(u >= [-0.01, -0.5]) and np.all(u <= [1.0, 0.5])
        x = x + 0.1 * np.einsum("snu,su->sn", motion_matrix(x[:, 2]), u)
        closest = min(closest, np.linalg.norm(x[0, :2]))
    assert closest < GOAL_RADIUS


def test_training_starts_safe_and_goal_oriented():
    starts = training_starts(0, 16)
    assert starts.shape == (16, 3)
    for p in starts:
        for a_j, b_j in OBSTACLES:
            h, _ = smooth_union(p[:2] @ a_j.T - b_j)
            assert h >= 0.3
        heading = np.arctan2(-p[1], -p[0])
        assert p[2] == pytest.approx(heading)


def test_rollout_zero_net_at_goal_has_zero_cost():
    sc = UnicycleScenario(seed=0, n_starts=2, horizon=20)
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0, hidden=(4,))
    model = sc.build_model(cfg)
    for w in model.f_theta.weights + model.w_phi.weights:
        w[:] = 0.0
    for b in model.f_theta.biases + model.w_phi.biases:
        b[:] = 0.0
    log, _ = rollout(model, np.array([[0.0, 0.0, 1.0]]), 20)
    assert log.costs[0] == pytest.approx(0.0, abs=1e-6)
    assert log.reached[0]


def test_rollout_satisfies_all_rows_every_step():
    sc = UnicycleScenario(seed=0, n_starts=3, horizon=60)
    cfg = TrainConfig(epochs=1, batch_size=3, seed=0, hidden=(8, 8), out_scale=0.3)
    model = sc.build_model(cfg)
    log, _ = rollout(model, sc.x0_train, 60)
    assert log.residuals.max(initial=0.0) <= 1e-9
    # executed commands inside the command box
    assert np.all(log.u_exec[..., 0] <= 1.0 + 1e-12)
    assert np.all(log.u_exec[..., 0] >= -0.01 - 1e-12)
    assert np.all(np.abs(log.u_exec[..., 1]) <= 0.5 + 1e-12)


def test_rollout_cost_recomputable_from_log():
    sc = UnicycleScenario(seed=1, n_starts=2, horizon=50)
    cfg = TrainConfig(epochs=1, batch_size=2, seed=1, hidden=(8, 8), out_scale=0.2)
    model = sc.build_model(cfg)
    log, _ = rollout(model, sc.x0_train, 50)
    for i in range(2):
        assert log.recompute_cost(i) == pytest.approx(log.costs[i], rel=1e-10)


def test_rollout_determinism():
    def run():
        sc = UnicycleScenario(seed=2, n_starts=2, horizon=40)
        cfg = TrainConfig(epochs=1, batch_size=2, seed=2, hidden=(8,), out_scale=0.2)
        model = sc.build_model(cfg)
        log, _ = rollout(model, sc.x0_train, 40)
        return log
    a, b = run(), run()
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.u_exec, b.u_exec)
    np.testing.assert_array_equal(a.costs, b.costs)


def test_adjoint_matches_replayed_surrogate():
    """Finite differences of the rollout with the stopped quantities frozen
    (nominal command, constraint matrix, saturation corners, branch choice)
    must match the adjoint sweep exactly."""
    from caffnet.experiments.unicycle import CMD_HI, CMD_LO, DT, Q_STAGE, Q_TERM, R_STAGE

    sc = UnicycleScenario(seed=3, n_starts=3, horizon=15)
    cfg = TrainConfig(epochs=1, batch_size=3, seed=3, layer_mode=MODE_CAFFNET,
                      hidden=(12, 12), out_scale=0.3)
    model = sc.build_model(cfg)
    x0 = sc.x0_train
    log, tapes = rollout(model, x0, sc.horizon, keep_tapes=True)

    def surrogate():
        xk = x0.copy()
        total = np.zeros(3)
        for st in tapes:
            f, _ = model.f_theta.forward(xk)
            w, _ = model.w_phi.forward(xk)
            _, b_k = cbf_rows_batch(xk)
            b_shift = b_k - np.einsum("sru,su->sr", st.a_rows, st.u_nom)
            sel = st.selection
            y = np.empty((3, 2))
            for i in range(3):
                if sel.interior[i]:
                    y[i] = f[i]
                else:
                    y[i] = (sel.null_proj[i] @ (f[i] + w[i])
                            + sel.pinv_rows[i] @ b_shift[i])
            pre = st.u_nom + y
            uk = np.where(st.sat_mask, pre, np.clip(pre, CMD_LO, CMD_HI))
            total += xk**2 @ Q_STAGE + y**2 @ R_STAGE
            xk = xk + DT * np.einsum("snu,su->sn", motion_matrix(xk[:, 2]), uk)
        total += xk**2 @ Q_TERM
        return float(np.mean(total))

    assert surrogate() == pytest.approx(float(np.mean(log.costs)), abs=1e-8)
    gf, gw = rollout_backward(model, tapes, log.states[:, -1])
    rng = make_rng(9, "fd")
    for nets, grads in ((model.f_theta, gf), (model.w_phi, gw)):
        params = nets.parameters()
        for _ in range(8):
            pi = int(rng.integers(0, len(params)))
            flat = params[pi].reshape(-1)
            ci = int(rng.integers(0, flat.size))
            orig = flat[ci]
            h = 1e-6
            flat[ci] = orig + h
            hi = surrogate()
            flat[ci] = orig - h
            lo = surrogate()
            flat[ci] = orig
            fd = (hi - lo) / (2 * h)
            an = float(grads[pi].reshape(-1)[ci])
            assert an == pytest.approx(fd, rel=2e-4, abs=2e-4)


def test_soft_mode_trains_and_reports_violations():
    sc = UnicycleScenario(seed=0, n_starts=4, horizon=40)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=0, layer_mode=MODE_SOFT,
                      hidden=(8, 8), out_scale=1.0)
    model = sc.build_model(cfg)
    trace = train(model, sc, cfg)
    assert len(trace.rows) == 3
    assert np.isfinite(trace.final_loss())


def test_evaluate_reports_goal_and_violation_fields():
    sc = UnicycleScenario(seed=0, n_starts=2, horizon=30)
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0, hidden=(6,), out_scale=0.1)
    model = sc.build_model(cfg)
    metrics = sc.evaluate(model, 0)
    assert set(metrics) >= {"cost", "viol_max", "viol_mean", "viol_frac",
                            "reached_goal", "aborted_at"}
    assert metrics["viol_max"] <= 1e-9
