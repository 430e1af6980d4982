"""Safe control policy learning for a unicycle robot.

The robot follows x' = g(x) u with state x = [p_x, p_y, theta] and command
u = [v, omega].  A PID controller supplies a nominal command toward the
origin; the learned network corrects it.  Safety is encoded as one affine
system per state (13 rows, 2 columns):

* 3 obstacle rows   - control barrier functions on the smooth union of the
                      per-edge barriers of each convex obstacle
* 6 state-bound rows - barrier form of the box on (p_x, p_y, theta)
* 4 command rows    - the box on (v, omega)

All rows constrain the total command u_nom + u_net; the layer sees them
shifted into u_net coordinates (b - A u_nom).  Training backpropagates the
rollout cost through the network and the Euler state chain, treating the
constraint data, the PID command and its integral state as constants, with
a straight-through pass for command saturation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..constraints import ConstraintProvider, ConstraintSystem, violation_stats
from ..layer import EmptyCandidateSetError, backward_batch, select_batch_varying
from ..neural import AdamState, adam_step
from ..rngs import make_rng
from ..training import (
    MODE_CAFFNET,
    MODE_SOFT,
    REPORT_EPS,
    ConstrainedModel,
    Scenario,
    TraceRow,
    TrainConfig,
)

DT = 0.1
HORIZON = 150
GOAL = np.zeros(2)
GOAL_RADIUS = 0.1
KAPPA = 10.0
TEST_START = np.array([-4.5, 0.0, 0.5])

OBSTACLES = [
    (np.array([[0.4472, -0.8944],
               [0.7071, 0.7071],
               [-0.2425, 0.9701],
               [-0.7071, -0.7071],
               [-0.8944, -0.4472]]),
     np.array([-0.2184, -0.5303, 0.6219, 1.1667, 1.4368])),
    (np.array([[-0.9685, 0.2489],
               [0.9417, 0.3363],
               [-0.3714, 0.9285],
               [0.3714, 0.9285],
               [-0.9417, -0.3363],
               [-0.2976, -0.9547]]),
     np.array([1.2755, -1.7670, -0.8511, -2.0249, 2.3274, 2.6868])),
    (np.array([[-0.9191, 0.3939],
               [0.8944, 0.4472],
               [0.9703, -0.2419],
               [-0.8701, -0.4930],
               [0.0000, -1.0000]]),
     np.array([2.9916, -1.9975, -2.5305, 2.4854, 0.1000])),
]

A_STATE = np.array([[1.0, 0, 0], [-1.0, 0, 0],
                    [0, 1.0, 0], [0, -1.0, 0],
                    [0, 0, 1.0], [0, 0, -1.0]])
B_STATE = np.array([1.0, 5.0, 2.0, 4.0, np.pi, np.pi])

A_CMD = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
B_CMD = np.array([1.0, 0.01, 0.5, 0.5])
CMD_LO = np.array([-0.01, -0.5])
CMD_HI = np.array([1.0, 0.5])

N_ROWS = 3 + A_STATE.shape[0] + A_CMD.shape[0]

# PID gains: linear velocity from the longitudinal error, angular velocity
# from lateral plus heading error (heading gains are zero here).
K_P = np.array([0.01, 0.2, 0.0])
K_I = np.array([0.05, 0.005, 0.0])
K_D = np.array([0.0, 0.01, 0.0])
PID_MIX = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])

Q_STAGE = np.array([1000.0, 1000.0, 0.0])
R_STAGE = np.array([1.0, 1.0])
Q_TERM = np.array([1e6, 1e6, 0.0])


def smooth_union(h_rows: np.ndarray, kappa: float = KAPPA,
                 m_j: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp composition of per-edge barriers, minus the ln(m)/kappa
    buffer so the result under-approximates the edgewise max.

    h_rows has shape (..., m); returns (h, lambda) with lambda the exponential
    weights e^(kappa (h_i - h)), which sum to m along the last axis.
    """
    h_rows = np.asarray(h_rows, dtype=float)
    m = h_rows.shape[-1] if m_j is None else m_j
    shift = h_rows.max(axis=-1, keepdims=True)
    lse = shift[..., 0] + np.log(np.sum(np.exp(kappa * (h_rows - shift)), axis=-1)) / kappa
    h = lse - np.log(m) / kappa
    lam = np.exp(kappa * (h_rows - h[..., None]))
    return h, lam


def motion_matrix(theta: np.ndarray) -> np.ndarray:
    """g(x) stacked per sample: shape (..., 3, 2)."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.shape + (3, 2))
    g[..., 0, 0] = np.cos(theta)
    g[..., 1, 0] = np.sin(theta)
    g[..., 2, 1] = 1.0
    return g


def cbf_rows_batch(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated affine system per state: (A, b) with shapes
    (S, 13, 2) and (S, 13)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    s = states.shape[0]
    pos = states[:, :2]
    theta = states[:, 2]
    a = np.zeros((s, N_ROWS, 2))
    b = np.empty((s, N_ROWS))

    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for j, (a_j, b_j) in enumerate(OBSTACLES):
        edge_h = pos @ a_j.T - b_j                   # (S, m_j), >= 0 outside edge
        h_j, lam = smooth_union(edge_h)
        # L_g h row: [sum_i lam_i (a_i . (cos, sin)), 0]
        lg_v = lam @ a_j[:, 0] * cos_t + lam @ a_j[:, 1] * sin_t
        a[:, j, 0] = -lg_v
        b[:, j] = h_j

    # state box as barriers: rows (A_x g(x)) u <= b_x - A_x x
    g = motion_matrix(theta)                          # (S, 3, 2)
    a[:, 3:9, :] = np.einsum("rn,snu->sru", A_STATE, g)
    b[:, 3:9] = B_STATE - states @ A_STATE.T

    a[:, 9:, :] = A_CMD
    b[:, 9:] = B_CMD
    return a, b


def cbf_constraints(state: np.ndarray) -> ConstraintSystem:
    """The 13x2 system for one state, constraining the total command."""
    a, b = cbf_rows_batch(np.asarray(state, dtype=float)[None, :])
    return ConstraintSystem(a[0], b[0])


def cbf_rhs_jacobian(states: np.ndarray) -> np.ndarray:
    """d b(x) / d x for the aggregated system: shape (S, 13, 3).

    Obstacle rows differentiate the log-sum-exp barrier (softmax-weighted
    edge normals); state-box rows are -A_x; command rows are constant.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    s = states.shape[0]
    jac = np.zeros((s, N_ROWS, 3))
    pos = states[:, :2]
    for j, (a_j, b_j) in enumerate(OBSTACLES):
        edge_h = pos @ a_j.T - b_j
        _, lam = smooth_union(edge_h)
        soft = lam / a_j.shape[0]                  # softmax weights sum to 1
        jac[:, j, :2] = soft @ a_j
    jac[:, 3:9, :] = -A_STATE
    return jac


class UnicycleCbfProvider(ConstraintProvider):
    """Input-dependent system over the robot state (A varies with x)."""

    n_in = 3
    m = N_ROWS
    n_out = 2

    def system(self, x: np.ndarray) -> ConstraintSystem:
        return cbf_constraints(x)


class PidController:
    """Batched PID toward the origin in the robot body frame.

    The tracking error is the goal displacement rotated into the body frame;
    the integral accumulates error * dt from episode start (reset on episode
    start), the derivative is a backward difference.
    """

    def __init__(self, n: int):
        self.integral = np.zeros((n, 3))
        self.prev_error = np.zeros((n, 3))
        self.first = True

    def command(self, states: np.ndarray) -> np.ndarray:
        cos_t, sin_t = np.cos(states[:, 2]), np.sin(states[:, 2])
        diff = -states                               # x_ref = 0
        e = np.empty_like(diff)
        e[:, 0] = cos_t * diff[:, 0] + sin_t * diff[:, 1]
        e[:, 1] = -sin_t * diff[:, 0] + cos_t * diff[:, 1]
        e[:, 2] = diff[:, 2]
        self.integral += e * DT
        de = np.zeros_like(e) if self.first else (e - self.prev_error) / DT
        self.first = False
        self.prev_error = e
        pid = e * K_P + self.integral * K_I + de * K_D
        u = pid @ PID_MIX.T
        return np.clip(u, CMD_LO, CMD_HI)


@dataclass
class RolloutLog:
    """Everything recorded along a batch of trajectories."""

    states: np.ndarray          # (S, N+1, 3)
    u_net: np.ndarray           # (S, N, 2) network corrections
    u_exec: np.ndarray          # (S, N, 2) executed commands
    u_nom: np.ndarray           # (S, N, 2) saturated nominal commands
    residuals: np.ndarray       # (S, N, 13) max(0, A u_exec - b)
    costs: np.ndarray           # (S,)
    reached: np.ndarray         # (S,) entered the goal disk at some step
    aborted_at: int = -1        # step where projection became infeasible

    def recompute_cost(self, i: int) -> float:
        """Cost re-derived from the logged trajectory alone."""
        xs = self.states[i]
        stage = np.sum(xs[:-1] ** 2 @ Q_STAGE) + np.sum(self.u_net[i] ** 2 @ R_STAGE)
        return float(stage + xs[-1] ** 2 @ Q_TERM)


@dataclass
class _StepTape:
    states: np.ndarray
    tape_f: list
    tape_w: list
    selection: object           # BatchSelection or None
    u_net: np.ndarray
    u_exec: np.ndarray
    u_nom: np.ndarray
    sat_mask: np.ndarray
    a_rows: np.ndarray
    b_rows: np.ndarray


def rollout(model: ConstrainedModel, x0: np.ndarray, n_steps: int = HORIZON,
            use_layer: bool | None = None, keep_tapes: bool = False,
            stop_on_infeasible: bool = False) -> tuple[RolloutLog, list[_StepTape]]:
    """Simulate the closed loop; optionally keep per-step tapes for backprop.

    With stop_on_infeasible the rollout ends early (recorded in aborted_at)
    instead of raising when no feasible projection exists; training keeps
    the raise.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    s = x0.shape[0]
    use_layer = (model.mode == MODE_CAFFNET) if use_layer is None else use_layer
    pid = PidController(s)

    states = np.empty((s, n_steps + 1, 3))
    states[:, 0] = x0
    u_net = np.zeros((s, n_steps, 2))
    u_exec = np.zeros((s, n_steps, 2))
    u_nom_log = np.zeros((s, n_steps, 2))
    residuals = np.zeros((s, n_steps, N_ROWS))
    costs = np.zeros(s)
    reached = np.linalg.norm(x0[:, :2] - GOAL, axis=1) <= GOAL_RADIUS
    tapes: list[_StepTape] = []
    aborted_at = -1

    xk = x0.copy()
    for k in range(n_steps):
        if not np.all(np.isfinite(xk)):
            raise FloatingPointError(f"non-finite state at step {k}")
        u_nom = pid.command(xk)
        a_k, b_k = cbf_rows_batch(xk)
        f, tape_f = model.f_theta.forward(xk)
        w, tape_w = model.w_phi.forward(xk)
        sel = None
        if use_layer:
            b_shift = b_k - np.einsum("sru,su->sr", a_k, u_nom)
            try:
                sel = select_batch_varying(a_k, model.combos.combos, b_shift,
                                           f, w, model.layer_cfg,
                                           want_pinv_rows=keep_tapes)
            except EmptyCandidateSetError:
                if not stop_on_infeasible:
                    raise
                aborted_at = k
                states = states[:, :k + 1]
                u_net, u_exec = u_net[:, :k], u_exec[:, :k]
                u_nom_log, residuals = u_nom_log[:, :k], residuals[:, :k]
                break
            y = sel.output
        else:
            y = f
        pre = u_nom + y
        uk = np.clip(pre, CMD_LO, CMD_HI)
        sat_mask = (pre >= CMD_LO) & (pre <= CMD_HI)

        u_net[:, k] = y
        u_exec[:, k] = uk
        u_nom_log[:, k] = u_nom
        residuals[:, k] = np.maximum(0.0, np.einsum("sru,su->sr", a_k, uk) - b_k)
        costs += xk**2 @ Q_STAGE + y**2 @ R_STAGE
        if keep_tapes:
            tapes.append(_StepTape(states=xk.copy(), tape_f=tape_f, tape_w=tape_w,
                                   selection=sel, u_net=y, u_exec=uk, u_nom=u_nom,
                                   sat_mask=sat_mask, a_rows=a_k, b_rows=b_k))

        xk = xk + DT * np.einsum("snu,su->sn", motion_matrix(xk[:, 2]), uk)
        states[:, k + 1] = xk
        reached |= np.linalg.norm(xk[:, :2] - GOAL, axis=1) <= GOAL_RADIUS

    costs += states[:, -1] ** 2 @ Q_TERM
    log = RolloutLog(states=states, u_net=u_net, u_exec=u_exec, u_nom=u_nom_log,
                     residuals=residuals, costs=costs, reached=reached,
                     aborted_at=aborted_at)
    return log, tapes


def rollout_backward(model: ConstrainedModel, tapes: list[_StepTape],
                     final_state: np.ndarray,
                     extra_u_grads: list[np.ndarray] | None = None):
    """Adjoint sweep of the rollout cost, normalized per sample.

    Gradients flow through the network outputs, the Euler state chain and
    the state-dependence of the constraint offsets b(x) (which enter the
    selected projection linearly through the chosen pseudoinverse).  The
    constraint matrix A(x), the nominal command and the saturation corners
    are treated as constants (straight-through inside the command box).
    `extra_u_grads` adds per-step gradients w.r.t. the network correction
    (used for the hinge penalty of the soft baseline).  Returns summed
    parameter gradients for (f_theta, w_phi).
    """
    s = final_state.shape[0]
    gf_params = [np.zeros_like(p) for p in model.f_theta.parameters()]
    gw_params = [np.zeros_like(p) for p in model.w_phi.parameters()]

    lam = 2.0 * final_state * Q_TERM / s
    for k in range(len(tapes) - 1, -1, -1):
        step = tapes[k]
        xk = step.states
        theta = xk[:, 2]
        g = motion_matrix(theta)
        # gradient reaching the executed command through the dynamics
        mu = DT * np.einsum("snu,sn->su", g, lam)
        mu = mu * step.sat_mask
        nu = mu + 2.0 * step.u_net * R_STAGE / s
        if extra_u_grads is not None:
            nu = nu + extra_u_grads[k]

        if step.selection is not None:
            gf_out, gw_out = backward_batch(step.selection, nu)
        else:
            gf_out, gw_out = nu, None

        gw_f, gb_f, gx_f = model.f_theta.backward(step.tape_f, gf_out, need_input_grad=True)
        for acc, g_new in zip(gf_params, gw_f + gb_f):
            acc += g_new
        gx_total = gx_f
        if gw_out is not None:
            gw_w, gb_w, gx_w = model.w_phi.backward(step.tape_w, gw_out, need_input_grad=True)
            for acc, g_new in zip(gw_params, gw_w + gb_w):
                acc += g_new
            gx_total = gx_total + gx_w

        # state adjoint: stage cost + dynamics (u held, theta column) + nets
        v = step.u_exec[:, 0]
        lam_next = lam.copy()
        lam = 2.0 * xk * Q_STAGE / s + lam_next + gx_total
        lam[:, 2] += DT * v * (-np.sin(theta) * lam_next[:, 0] + np.cos(theta) * lam_next[:, 1])
        if step.selection is not None and step.selection.pinv_rows is not None:
            # projection depends on x through the constraint offsets b(x)
            u_b = np.einsum("snm,sn->sm", step.selection.pinv_rows, nu)
            lam += np.einsum("smx,sm->sx", cbf_rhs_jacobian(xk), u_b)
    return gf_params, gw_params


def training_starts(seed: int, count: int, margin: float = 0.3) -> np.ndarray:
    """Initial states inside the state box, outside every obstacle by a
    smooth-union margin, oriented toward the origin."""
    rng = make_rng(seed, "unicycle-starts")
    starts = []
    while len(starts) < count:
        p = rng.uniform([-5.0, -4.0], [1.0, 2.0])
        h = [smooth_union(p @ a_j.T - b_j)[0] for a_j, b_j in OBSTACLES]
        if min(h) < margin or np.linalg.norm(p) < 2.0 * GOAL_RADIUS:
            continue
        theta = np.arctan2(-p[1], -p[0])
        starts.append([p[0], p[1], theta])
    return np.asarray(starts)


class UnicycleScenario(Scenario):
    name = "unicycle"

    def __init__(self, seed: int = 0, n_starts: int = 20, horizon: int = HORIZON):
        self.provider = UnicycleCbfProvider()
        self.horizon = horizon
        self.x0_train = training_starts(seed, n_starts)

    def training_inputs(self, seed: int) -> np.ndarray:
        return self.x0_train

    def run_epoch(self, model: ConstrainedModel, opt_f: AdamState, opt_w: AdamState,
                  cfg: TrainConfig, epoch: int, rng: np.random.Generator,
                  inputs: np.ndarray) -> TraceRow:
        n = inputs.shape[0]
        order = rng.permutation(n) if cfg.batch_size < n else np.arange(n)
        loss_sum = 0.0
        stats_parts = []
        for start in range(0, n, cfg.batch_size):
            x0 = inputs[order[start:start + cfg.batch_size]]
            s = x0.shape[0]
            log, tapes = rollout(model, x0, self.horizon, keep_tapes=True)
            loss = float(np.mean(log.costs))

            extra = None
            if model.mode == MODE_SOFT:
                # hinge penalty on the pre-saturation total command; gradient
                # reaches the network correction only (nominal stays stopped)
                extra = []
                for step in tapes:
                    pre = step.u_nom + step.u_net
                    resid = np.einsum("sru,su->sr", step.a_rows, pre) - step.b_rows
                    loss += cfg.penalty_weight * float(np.maximum(0.0, resid).sum()) / s
                    active = (resid > 0.0).astype(float)
                    extra.append(cfg.penalty_weight / s
                                 * np.einsum("sr,sru->su", active, step.a_rows))

            gf_params, gw_params = rollout_backward(model, tapes, log.states[:, -1], extra)
            adam_step(opt_f, model.f_theta.parameters(), gf_params)
            if model.mode == MODE_CAFFNET:
                adam_step(opt_w, model.w_phi.parameters(), gw_params)
            loss_sum += loss * s
            stats_parts.append(log.residuals.reshape(-1))

        stats = violation_stats(np.concatenate(stats_parts), REPORT_EPS)
        return TraceRow(epoch=epoch, loss=loss_sum / n,
                        max_violation=stats.max, mean_violation=stats.mean)

    def evaluate(self, model: ConstrainedModel, seed: int) -> dict:
        use_layer = model.mode != MODE_SOFT  # post-hoc ablation projects at inference
        log, _ = rollout(model, TEST_START[None, :], self.horizon,
                         use_layer=use_layer, stop_on_infeasible=True)
        stats = violation_stats(log.residuals, REPORT_EPS)
        return {
            "cost": float(log.costs[0]),
            "viol_max": stats.max,
            "viol_mean": stats.mean,
            "viol_frac": stats.frac_violated,
            "reached_goal": bool(log.reached[0]),
            "aborted_at": log.aborted_at,
        }

    def test_rollout(self, model: ConstrainedModel, use_layer: bool | None = None) -> RolloutLog:
        log, _ = rollout(model, TEST_START[None, :], self.horizon,
                         use_layer=use_layer if use_layer is not None
                         else model.mode != MODE_SOFT,
                         stop_on_infeasible=True)
        return log
