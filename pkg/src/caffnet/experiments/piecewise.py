"""Scalar regression under four piecewise bounds.

The target is a piecewise nonlinear function on [-2, 2] boxed between two
upper and two lower piecewise bounds.  The constraint system for a scalar
output is A = [1, 1, -1, -1]^T with b = [g1_up, g2_up, -g1_lo, -g2_lo], so
the feasible band at x is [max(lower bounds), min(upper bounds)].

Pieces are split at -1, 0 and 1 with each breakpoint belonging to the piece
on its left (intervals (-inf,-1], (-1,0], (0,1], (1,inf)).
"""

from __future__ import annotations

import numpy as np

from ..constraints import FixedAProvider, violation_stats
from ..rngs import make_rng
from ..training import REPORT_EPS, ConstrainedModel, Scenario, mse_and_grad

N_TRAIN = 50
N_TEST = 400
X_RANGE = (-2.0, 2.0)


def _piecewise(x: np.ndarray, left, mid_left, mid_right, right) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    conds = [x <= -1.0, (x > -1.0) & (x <= 0.0), (x > 0.0) & (x <= 1.0), x > 1.0]
    return np.piecewise(x, conds, [left, mid_left, mid_right, right])


def target_fn(x) -> np.ndarray:
    return _piecewise(
        x,
        lambda t: -5.0 * np.sin(np.pi / 2.0 * (t + 1.0)) - 2.0,
        lambda t: -2.0 * np.ones_like(t),
        lambda t: 2.0 - 9.0 * (t - 2.0 / 3.0) ** 2,
        lambda t: 3.0 / t**2 - 2.0,
    )


def upper_bound_1(x) -> np.ndarray:
    return _piecewise(
        x,
        lambda t: -3.0 * np.sin(np.pi / 2.0 * (t + 1.0)) + 0.2,
        lambda t: -2.0 * np.ones_like(t),
        lambda t: 3.0 - 4.0 * (t - 0.5) ** 2,
        lambda t: 2.0 * np.ones_like(t),
    )


def upper_bound_2(x) -> np.ndarray:
    return _piecewise(
        x,
        lambda t: -3.0 * np.sin(np.pi / 2.0 * (t + 1.0)) ** 3 + 1.0,
        lambda t: 2.0 * np.ones_like(t),
        lambda t: 3.0 - 4.0 * (t - 0.8) ** 2,
        lambda t: 2.5 * np.ones_like(t),
    )


def lower_bound_1(x) -> np.ndarray:
    return _piecewise(
        x,
        lambda t: 5.0 * np.sin(np.pi / 2.0 * (t + 1.0)) ** 2 - 3.0,
        lambda t: -2.0 * np.ones_like(t),
        lambda t: (4.0 - 9.0 * (t - 2.0 / 3.0) ** 2) * t - 2.5,
        lambda t: 3.0 / t**3 - 2.5,
    )


def lower_bound_2(x) -> np.ndarray:
    return _piecewise(
        x,
        lambda t: 5.0 * np.sin(np.pi / 2.0 * (t + 1.0)) ** 8 - 2.0,
        lambda t: -3.0 * np.ones_like(t),
        lambda t: (5.0 - 4.0 * (t - 1.0 / 6.0) ** 2) * t - 2.5,
        lambda t: 1.5 / t**3 - 16.0 / 9.0,
    )


BOUND_FNS = {
    "g1_up": upper_bound_1,
    "g2_up": upper_bound_2,
    "g1_lo": lower_bound_1,
    "g2_lo": lower_bound_2,
}


def bounds_vector(x: float) -> np.ndarray:
    """b(x) = [g1_up, g2_up, -g1_lo, -g2_lo] for one scalar input."""
    return np.array([
        float(upper_bound_1(np.float64(x))),
        float(upper_bound_2(np.float64(x))),
        -float(lower_bound_1(np.float64(x))),
        -float(lower_bound_2(np.float64(x))),
    ])


class PiecewiseBoundsProvider(FixedAProvider):
    """m=4, n_out=1 band constraints with a constant sign matrix."""

    def __init__(self):
        super().__init__(np.array([[1.0], [1.0], [-1.0], [-1.0]]), n_in=1)

    def b_of(self, x: np.ndarray) -> np.ndarray:
        return bounds_vector(float(np.asarray(x).reshape(-1)[0]))

    def b_batch(self, xs: np.ndarray) -> np.ndarray:
        t = np.atleast_2d(np.asarray(xs, dtype=float))[:, 0]
        return np.column_stack([
            upper_bound_1(t), upper_bound_2(t), -lower_bound_1(t), -lower_bound_2(t)
        ])


def piecewise_dataset(seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(x_train, y_train, x_test, y_test); 50 uniform training samples and
    400 linearly spaced test points on [-2, 2]."""
    rng = make_rng(seed, "piecewise-data")
    x_train = rng.uniform(X_RANGE[0], X_RANGE[1], size=N_TRAIN)
    x_test = np.linspace(X_RANGE[0], X_RANGE[1], N_TEST)
    return (x_train[:, None], target_fn(x_train)[:, None],
            x_test[:, None], target_fn(x_test)[:, None])


class PiecewiseScenario(Scenario):
    name = "piecewise"

    def __init__(self, seed: int = 0):
        self.provider = PiecewiseBoundsProvider()
        self.x_train, self.y_train, self.x_test, self.y_test = piecewise_dataset(seed)

    def training_inputs(self, seed: int) -> np.ndarray:
        return self.x_train

    def loss_and_grad(self, x_batch: np.ndarray, y_batch: np.ndarray):
        # inputs are unique floats, so targets can be matched by value
        t = target_fn(x_batch[:, 0])[:, None]
        return mse_and_grad(y_batch, t)

    def evaluate(self, model: ConstrainedModel, seed: int) -> dict:
        pred = model.predict(self.x_test)
        mse = float(np.mean((pred - self.y_test) ** 2))
        resid = model.residuals(self.x_test, pred)
        stats = violation_stats(resid, REPORT_EPS)
        return {
            "mse": mse,
            "viol_max": stats.max,
            "viol_mean": stats.mean,
            "viol_frac": stats.frac_violated,
        }
