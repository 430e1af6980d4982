"""Learning to solve a constrained nonconvex program, unsupervised.

The program is  min_y 0.5 y'Qy + p'sin(y)  s.t.  G y <= h, C y = x  with
n_out = n_ineq = 5 and n_in = n_eq = 3.  The equality pair is stacked as two
inequality blocks, giving the m=11 system A = [G; C; -C], b = [h; x; -x].
Feasibility for every x in [-1,1]^3 is guaranteed by choosing
h_i = sum_j |(G C^+)_{ij}|, which makes y = C^+ x feasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..constraints import FixedAProvider, violation_stats
from ..linalg import pinv
from ..oracle import ReferenceProgramSolver
from ..rngs import make_rng
from ..training import REPORT_EPS, ConstrainedModel, Scenario

N_EQ = 3
N_OUT = 5
N_INEQ = 5


@dataclass(frozen=True)
class SolverInstance:
    """One random program family: fixed (Q, p, G, C, h), inputs vary."""

    q: np.ndarray
    p: np.ndarray
    g: np.ndarray
    c: np.ndarray
    h: np.ndarray

    @property
    def a_stacked(self) -> np.ndarray:
        return np.vstack([self.g, self.c, -self.c])

    def b_stacked(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.h, x, -x])

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.q @ y + self.p @ np.sin(y))

    def objective_batch(self, ys: np.ndarray) -> np.ndarray:
        return 0.5 * np.einsum("sn,nk,sk->s", ys, self.q, ys) + np.sin(ys) @ self.p


def solver_instance(seed: int) -> SolverInstance:
    """Random instance; C is regenerated (sub-seeded) until full row rank."""
    rng = make_rng(seed, "solver-instance")
    g = rng.uniform(-1.0, 1.0, size=(N_INEQ, N_OUT))
    attempt = 0
    while True:
        c = make_rng(seed, "solver-instance-c", attempt).uniform(-1.0, 1.0, size=(N_EQ, N_OUT))
        if np.linalg.matrix_rank(c) == N_EQ:
            break
        attempt += 1
    q = np.diag(rng.uniform(0.0, 1.0, size=N_OUT) + 0.1)
    p = rng.uniform(-1.0, 1.0, size=N_OUT)
    h = np.sum(np.abs(g @ pinv(c)), axis=1)
    return SolverInstance(q=q, p=p, g=g, c=c, h=h)


class StackedProgramProvider(FixedAProvider):
    """A = [G; C; -C] fixed; b carries the input through the equality rows."""

    def __init__(self, instance: SolverInstance):
        super().__init__(instance.a_stacked, n_in=N_EQ)
        self.instance = instance

    def b_of(self, x: np.ndarray) -> np.ndarray:
        return self.instance.b_stacked(np.asarray(x, dtype=float))

    def b_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        h = np.broadcast_to(self.instance.h, (xs.shape[0], N_INEQ))
        return np.concatenate([h, xs, -xs], axis=1)


def sample_inputs(seed: int, label: str, count: int) -> np.ndarray:
    return make_rng(seed, "solver-x", label).uniform(-1.0, 1.0, size=(count, N_EQ))


class SolverScenario(Scenario):
    name = "solver"

    def __init__(self, seed: int = 0, n_train: int = 200, n_test: int = 200,
                 oracle_starts: int = 16):
        self.instance = solver_instance(seed)
        self.provider = StackedProgramProvider(self.instance)
        self.x_train = sample_inputs(seed, "train", n_train)
        self.x_test = sample_inputs(seed, "test", n_test)
        self.oracle_starts = oracle_starts

    def training_inputs(self, seed: int) -> np.ndarray:
        return self.x_train

    def loss_and_grad(self, x_batch: np.ndarray, y_batch: np.ndarray):
        inst = self.instance
        s = y_batch.shape[0]
        loss = float(np.mean(inst.objective_batch(y_batch)))
        grad = (y_batch @ inst.q.T + inst.p * np.cos(y_batch)) / s
        return loss, grad

    def oracle_objectives(self, xs: np.ndarray, seed: int = 0) -> np.ndarray:
        solver = ReferenceProgramSolver(self.instance.q, self.instance.p,
                                        self.instance.g, self.instance.h,
                                        self.instance.c,
                                        n_starts=self.oracle_starts, seed=seed)
        return np.array([solver.solve(x).objective for x in xs])

    def evaluate(self, model: ConstrainedModel, seed: int) -> dict:
        pred = model.predict(self.x_test)
        obj = float(np.mean(self.instance.objective_batch(pred)))
        resid = model.residuals(self.x_test, pred)
        ineq = violation_stats(resid[:, :N_INEQ], REPORT_EPS)
        # the paired rows C y <= x and -C y <= -x measure |C y - x| directly
        eq_resid = np.maximum(resid[:, N_INEQ:N_INEQ + N_EQ],
                              resid[:, N_INEQ + N_EQ:])
        eq = violation_stats(eq_resid, REPORT_EPS)
        return {
            "objective": obj,
            "ineq_max": ineq.max,
            "ineq_mean": ineq.mean,
            "ineq_frac": ineq.frac_violated,
            "eq_max": eq.max,
            "eq_mean": eq.mean,
            "eq_frac": eq.frac_violated,
        }
