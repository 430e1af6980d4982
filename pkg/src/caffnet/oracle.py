"""Brute-force references, kept independent of the projection layer.

* exact_projection    - Euclidean projection onto {y : A y <= b} by
                        exhaustive active-set enumeration
* feasibility_check   - witness search by subgradient descent plus face
                        enumeration at small scale
* solve_reference_program - multi-start projected gradient descent for the
                        nonconvex quadratic-plus-sine program with equality
                        and inequality constraints

These back the layer's property suites and the solver experiment's
benchmark column, so none of them may share selection logic with the layer.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSystem
from .linalg import pinv
from .rngs import make_rng

FEAS_EPS = 1e-8


@dataclass(frozen=True)
class OracleResult:
    y_star: np.ndarray
    active_set: tuple[int, ...]
    objective: float
    converged: bool

    def to_json(self) -> str:
        return json.dumps({
            "y_star": self.y_star.tolist(),
            "active_set": list(self.active_set),
            "objective": self.objective,
            "converged": self.converged,
        })


def _max_violation(a: np.ndarray, b: np.ndarray, y: np.ndarray) -> float:
    return float((a @ y - b).max(initial=0.0))


def exact_projection(sys: ConstraintSystem, z) -> OracleResult:
    """Closest feasible point to z in the 2-norm, by active-set enumeration.

    Every subset of up to n_out constraint rows is treated as a candidate
    active set; the equality-constrained least-distance problem for each is
    solved through the pseudoinverse, infeasible solutions are discarded and
    the closest survivor wins.  Exhaustive for the intended size range
    (n_out <= 6, m <= 12).
    """
    z = np.asarray(z, dtype=float)
    a, b = sys.a_matrix, sys.b_vector
    best_y = None
    best_d = np.inf
    best_set: tuple[int, ...] = ()
    if _max_violation(a, b, z) <= FEAS_EPS:
        best_y, best_d = z.copy(), 0.0
    for k in range(1, min(sys.m, sys.n_out) + 1):
        for subset in itertools.combinations(range(sys.m), k):
            rows = np.asarray(subset, dtype=int)
            a_s, b_s = a[rows, :], b[rows]
            y = z - pinv(a_s) @ (a_s @ z - b_s)
            if _max_violation(a, b, y) > FEAS_EPS:
                continue
            d = float(np.linalg.norm(y - z))
            if d < best_d:
                best_y, best_d = y, d
                best_set = tuple(int(j) + 1 for j in subset)
    if best_y is None:
        return OracleResult(y_star=z.copy(), active_set=(), objective=np.inf, converged=False)
    return OracleResult(y_star=best_y, active_set=best_set, objective=best_d, converged=True)


def feasibility_check(sys: ConstraintSystem, seed: int = 0,
                      n_starts: int = 8, n_steps: int = 400) -> tuple[bool, np.ndarray | None]:
    """Search for a witness of {y : A y <= b} being non-empty.

    Runs projected subgradient descent on the hinge objective
    max(0, max_i(a_i y - b_i)) from several starts, then falls back to
    enumerating candidate faces (subsets of up to n_out rows solved by
    pseudoinverse).  Returns (feasible, witness).
    """
    a, b = sys.a_matrix, sys.b_vector
    rng = make_rng(seed, "feasibility", sys.m, sys.n_out)

    starts = [np.zeros(sys.n_out)]
    scale = 1.0 + float(np.abs(b).max(initial=0.0))
    for _ in range(n_starts - 1):
        starts.append(rng.normal(0.0, scale, size=sys.n_out))
    for y in starts:
        y = y.copy()
        for _ in range(n_steps):
            r = a @ y - b
            worst = int(np.argmax(r))
            if r[worst] <= FEAS_EPS:
                return True, y
            g = a[worst]
            gn = float(np.dot(g, g))
            if gn == 0.0:
                break  # a zero row can only be violated by b < 0: unfixable
            y = y - (r[worst] / gn) * g
        if _max_violation(a, b, y) <= FEAS_EPS:
            return True, y

    for k in range(1, min(sys.m, sys.n_out) + 1):
        for subset in itertools.combinations(range(sys.m), k):
            rows = np.asarray(subset, dtype=int)
            a_s, b_s = a[rows, :], b[rows]
            y = pinv(a_s) @ b_s
            if _max_violation(a, b, y) <= FEAS_EPS:
                return True, y
    return False, None


def nullspace_basis(c: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of null(c) as columns, with a fixed sign convention.

    Each basis vector is flipped so its first component of largest magnitude
    is positive, making the parameterization deterministic.
    """
    c = np.asarray(c, dtype=float)
    _, s, vt = np.linalg.svd(c)
    rank = int(np.sum(s > rank_tol * (s[0] if s.size else 0.0)))
    basis = vt[rank:].T
    for j in range(basis.shape[1]):
        col = basis[:, j]
        lead = np.argmax(np.abs(col))
        if col[lead] < 0:
            basis[:, j] = -col
    return basis


class ReferenceProgramSolver:
    """Multi-start projected gradient solver for

        min_y  0.5 y'Qy + p'sin(y)   s.t.  G y <= h,  C y = x.

    Equalities are eliminated by writing y = C^+ x + N z with N a null-space
    basis of C; the inequality polytope in z is handled by exact Euclidean
    projection of the iterates (active sets enumerated once, since G N is
    fixed).  Step sizes come from backtracking line search and the best of
    all starts wins, ties by start index.
    """

    def __init__(self, q: np.ndarray, p: np.ndarray, g: np.ndarray, h: np.ndarray,
                 c: np.ndarray, n_starts: int = 16, n_steps: int = 250, seed: int = 0):
        self.q = np.asarray(q, dtype=float)
        self.p = np.asarray(p, dtype=float)
        self.g = np.asarray(g, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.c_pinv = pinv(self.c)
        self.basis = nullspace_basis(self.c)
        self.gz = self.g @ self.basis                     # inequality matrix in z
        self.n_starts = n_starts
        self.n_steps = n_steps
        self.seed = seed
        self._proj_sets = self._projection_sets()

    def _projection_sets(self):
        """Pseudoinverses for every candidate active set of the z-polytope."""
        n_z = self.gz.shape[1]
        sets = []
        for k in range(1, min(self.gz.shape[0], n_z) + 1):
            for subset in itertools.combinations(range(self.gz.shape[0]), k):
                rows = np.asarray(subset, dtype=int)
                sets.append((rows, pinv(self.gz[rows, :])))
        return sets

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.q @ y + self.p @ np.sin(y))

    def _grad_z(self, z: np.ndarray, y0: np.ndarray) -> np.ndarray:
        y = y0 + self.basis @ z
        grad_y = self.q @ y + self.p * np.cos(y)
        return self.basis.T @ grad_y

    def _project_z(self, z: np.ndarray, r: np.ndarray) -> np.ndarray | None:
        """Euclidean projection of z onto {z : Gz z <= r}; None if infeasible."""
        best, best_d = None, np.inf
        if (self.gz @ z - r).max(initial=0.0) <= FEAS_EPS:
            return z
        for rows, m_pinv in self._proj_sets:
            cand = z - m_pinv @ (self.gz[rows, :] @ z - r[rows])
            if (self.gz @ cand - r).max(initial=0.0) > FEAS_EPS:
                continue
            d = float(np.linalg.norm(cand - z))
            if d < best_d:
                best, best_d = cand, d
        return best

    def solve(self, x: np.ndarray) -> OracleResult:
        x = np.asarray(x, dtype=float)
        y0 = self.c_pinv @ x
        r = self.h - self.g @ y0
        n_z = self.basis.shape[1]
        rng = make_rng(self.seed, "refprog-starts")
        starts = [np.zeros(n_z)] + [rng.normal(0.0, 1.0, size=n_z) for _ in range(self.n_starts - 1)]

        best_y, best_obj = None, np.inf
        for z in starts:
            z = self._project_z(z, r)
            if z is None:
                continue
            step = 1.0
            obj = self.objective(y0 + self.basis @ z)
            for _ in range(self.n_steps):
                grad = self._grad_z(z, y0)
                moved = False
                while step > 1e-12:
                    trial = self._project_z(z - step * grad, r)
                    if trial is not None:
                        trial_obj = self.objective(y0 + self.basis @ trial)
                        if trial_obj < obj - 1e-14:
                            z, obj, moved = trial, trial_obj, True
                            step *= 1.5
                            break
                    step *= 0.5
                if not moved:
                    break
            if obj < best_obj:
                best_y, best_obj = y0 + self.basis @ z, obj

        if best_y is None:
            return OracleResult(y_star=y0, active_set=(), objective=np.inf, converged=False)
        return OracleResult(y_star=best_y, active_set=(), objective=best_obj, converged=True)


def solve_reference_program(q, p, g, h, c, x, n_starts: int = 16, seed: int = 0) -> OracleResult:
    """One-shot interface over ReferenceProgramSolver."""
    return ReferenceProgramSolver(q, p, g, h, c, n_starts=n_starts, seed=seed).solve(x)
