"""Seeded property suites behind both the test suite and `caffnet verify`.

Each suite returns a SuiteReport; failures carry a JSON fixture of the
offending case so it can be pinned and replayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import ComboMode, ConstraintSystem, enumerate_combinations
from .layer import LayerConfig, SubConstraintTensors, backward, forward, select_batch
from .linalg import pinv, spectral_norm
from .neural import Mlp
from .oracle import exact_projection
from .rngs import make_rng


@dataclass
class SuiteReport:
    name: str
    total: int
    failures: list[dict] = field(default_factory=list)
    skipped: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        state = "pass" if self.passed else f"FAIL ({len(self.failures)} failures)"
        extra = "".join(f", {k}={v:.3g}" if isinstance(v, float) else f", {k}={v}"
                        for k, v in self.stats.items())
        return f"{self.name}: {state} [{self.total} cases{extra}]"


def random_feasible_system(rng: np.random.Generator, n_max: int = 4, m_max: int = 10
                           ) -> tuple[ConstraintSystem, np.ndarray, np.ndarray]:
    """A feasible random system plus random (f, w) heads.

    Feasibility is forced by b = A y0 + slack with slack >= 0 (some entries
    zero so rows are active at y0).  A fraction of systems get duplicated or
    linearly dependent rows, and some are built rank-deficient outright.
    """
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    style = rng.uniform()
    if style < 0.2 and n > 1:
        # rank-deficient A via a low-rank product
        r = int(rng.integers(1, n))
        a = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
    else:
        a = rng.normal(size=(m, n))
    if style > 0.75 and m >= 2:
        src = int(rng.integers(0, m - 1))
        a[m - 1] = a[src] * rng.uniform(0.5, 2.0)   # scaled duplicate row
    if rng.uniform() < 0.1:
        a[int(rng.integers(0, m))] = 0.0            # vacuous row
    y0 = rng.normal(size=n)
    slack = np.abs(rng.normal(size=m)) * (rng.uniform(size=m) > 0.3)
    b = a @ y0 + slack
    f = rng.normal(size=n) * 3.0
    w = rng.normal(size=n)
    return ConstraintSystem(a, b), f, w


def _fixture(sys: ConstraintSystem, f: np.ndarray, w: np.ndarray, **extra) -> dict:
    doc = {"A": sys.a_matrix.tolist(), "b": sys.b_vector.tolist(),
           "f_theta": f.tolist(), "w_phi": w.tolist()}
    doc.update(extra)
    return doc


def feasibility_suite(cases: int = 10_000, seed: int = 0,
                      feas_tol: float = 1e-9) -> SuiteReport:
    """Hard satisfaction and candidate existence on randomized feasible
    systems, including rank-deficient and duplicated-row A matrices."""
    rng = make_rng(seed, "verify-feasibility")
    cfg = LayerConfig(feas_tol=feas_tol)
    report = SuiteReport("feasibility", cases)
    worst_out = 0.0
    min_feasible = math.inf
    for case in range(cases):
        sys, f, w = random_feasible_system(rng)
        combos = enumerate_combinations(sys.m, sys.n_out)
        tensors = SubConstraintTensors(sys.a_matrix, combos, cfg.rank_tol)
        # candidate existence, independent of where f sits
        y = tensors.candidate_outputs(f[None, :], w[None, :], sys.b_vector[None, :])[0]
        resid_max = (y @ sys.a_matrix.T - sys.b_vector).max(axis=1)
        n_feasible = int(np.sum(resid_max <= cfg.feas_tol))
        min_feasible = min(min_feasible, n_feasible)
        if n_feasible == 0:
            report.failures.append(_fixture(sys, f, w, case=case, kind="no-feasible-candidate"))
            continue
        sel = select_batch(tensors, sys.b_vector[None, :], f[None, :], w[None, :], cfg)
        out_viol = float(sel.residual.max(initial=0.0))
        worst_out = max(worst_out, out_viol)
        if out_viol > feas_tol:
            report.failures.append(_fixture(sys, f, w, case=case, kind="output-violation",
                                            violation=out_viol))
    report.stats = {"worst_output_violation": worst_out,
                    "min_feasible_candidates": int(min_feasible)}
    return report


def projection_oracle_suite(cases: int = 1000, seed: int = 0,
                            dist_tol: float = 1e-6) -> SuiteReport:
    """Layer with w=0, p=2 against the exhaustive Euclidean projection."""
    rng = make_rng(seed, "verify-projection")
    cfg = LayerConfig()
    report = SuiteReport("projection-oracle", cases)
    worst_dist = 0.0
    worst_out = 0.0
    compared_outputs = 0
    for case in range(cases):
        sys, f, _ = random_feasible_system(rng)
        combos = enumerate_combinations(sys.m, sys.n_out)
        zero = np.zeros(sys.n_out)
        rec = forward(sys, combos, f, zero, cfg, keep_candidates=True)
        orc = exact_projection(sys, f)
        d_layer = float(np.linalg.norm(rec.output - f))
        gap = abs(d_layer - orc.objective)
        worst_dist = max(worst_dist, gap)
        if not orc.converged or gap > dist_tol:
            report.failures.append(_fixture(sys, f, zero, case=case, kind="distance-mismatch",
                                            layer=d_layer, oracle=orc.objective))
            continue
        # compare points when the argmin is numerically well separated
        dists = sorted(c.distance for c in rec.candidates if c.feasible)
        unique = rec.branch == "interior" or len(dists) < 2 or dists[1] - dists[0] > 1e-7
        if unique:
            compared_outputs += 1
            out_gap = float(np.linalg.norm(rec.output - orc.y_star))
            worst_out = max(worst_out, out_gap)
            if out_gap > dist_tol:
                report.failures.append(_fixture(sys, f, zero, case=case, kind="point-mismatch",
                                                gap=out_gap))
    report.stats = {"worst_distance_gap": worst_dist, "worst_point_gap": worst_out,
                    "outputs_compared": compared_outputs}
    return report


def pinv_suite(cases: int = 1000, seed: int = 0, tol: float = 1e-8) -> SuiteReport:
    """Penrose identities, projector norm bounds, and consistency solves."""
    rng = make_rng(seed, "verify-pinv")
    report = SuiteReport("pinv", cases)
    worst = 0.0
    for case in range(cases):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(1, 9))
        a = rng.normal(size=(m, n))
        if rng.uniform() < 0.25 and min(m, n) > 1:
            r = int(rng.integers(1, min(m, n)))
            a = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
        ap = pinv(a)
        scale_a = max(1e-30, np.abs(a).max())
        scale_p = max(1e-30, np.abs(ap).max())
        errs = {
            "penrose1": np.abs(a @ ap @ a - a).max() / scale_a,
            "penrose2": np.abs(ap @ a @ ap - ap).max() / scale_p,
            "sym_aap": np.abs(a @ ap - (a @ ap).T).max(),
            "sym_apa": np.abs(ap @ a - (ap @ a).T).max(),
            "proj_norm": spectral_norm(ap @ a) - 1.0,
            "complement_norm": spectral_norm(np.eye(n) - ap @ a) - 1.0,
        }
        # consistent system: A y = b with b in range(A) has A A^+ b = b
        y = rng.normal(size=n)
        b = a @ y
        errs["consistency"] = np.abs(a @ (ap @ b) - b).max() / max(1.0, np.abs(b).max())
        worst = max(worst, max(errs.values()))
        bad = {k: v for k, v in errs.items() if v > tol}
        if bad:
            report.failures.append({"A": a.tolist(), "case": case, "errors": bad})
    report.stats = {"worst_error": worst}
    return report


def combinatorics_suite(m_max: int = 16, n_max: int = 8) -> SuiteReport:
    """Family sizes against binomial sums and the 2^m - 1 ceiling; the lite
    family must be a subset of the full one."""
    total = 0
    report = SuiteReport("combinatorics", 0)
    for m in range(1, m_max + 1):
        for n in range(1, n_max + 1):
            total += 1
            full = enumerate_combinations(m, n, ComboMode.FULL)
            lite = enumerate_combinations(m, n, ComboMode.LITE)
            kmax = min(m, n)
            expect_full = sum(math.comb(m, k) for k in range(1, kmax + 1))
            expect_lite = m if kmax == 1 else m + math.comb(m, kmax)
            full_set = set(full.combos)
            problems = []
            if len(full.combos) != expect_full or full.size != expect_full:
                problems.append("full-size")
            if expect_full > 2**m - 1:
                problems.append("ceiling")
            if len(lite.combos) != expect_lite or lite.size != expect_lite:
                problems.append("lite-size")
            if not set(lite.combos) <= full_set:
                problems.append("lite-not-subset")
            if list(full.combos) != sorted(full_set) or len(full_set) != len(full.combos):
                problems.append("ordering-or-duplicates")
            if problems:
                report.failures.append({"m": m, "n_out": n, "problems": problems})
    report.total = total
    return report


def _relu_pattern(tape) -> tuple:
    return tuple(tuple((h > 0.0).ravel()) for h in tape[1:-1])


def gradient_suite(cases: int = 500, seed: int = 0, rel_tol: float = 1e-4,
                   fd_step: float = 1e-6, min_pass_frac: float = 0.95) -> SuiteReport:
    """Composed MLP + layer gradients against central finite differences.

    Probes where the perturbation flips the layer branch/combination or a
    hidden ReLU sign are unstable and excluded (not counted toward `cases`).
    """
    rng = make_rng(seed, "verify-gradients")
    cfg = LayerConfig()
    report = SuiteReport("gradients", cases)
    checked = 0
    mismatches = 0
    attempts = 0
    worst_rel = 0.0
    while checked < cases and attempts < cases * 20:
        attempts += 1
        sys, _, _ = random_feasible_system(rng, n_max=3, m_max=6)
        combos = enumerate_combinations(sys.m, sys.n_out)
        n_in = int(rng.integers(1, 4))
        net_f = Mlp(n_in, sys.n_out, hidden=(8, 8), rng=rng)
        net_w = Mlp(n_in, sys.n_out, hidden=(8, 8), rng=rng)
        x = rng.normal(size=n_in)
        c = rng.normal(size=sys.n_out)          # loss = c . y

        def run():
            f, tape_f = net_f.forward_single(x)
            w, tape_w = net_w.forward_single(x)
            rec = forward(sys, combos, f, w, cfg)
            loss = float(c @ rec.output)
            state = (rec.branch, rec.gamma, _relu_pattern(tape_f), _relu_pattern(tape_w))
            return loss, state, rec, tape_f, tape_w

        _, state0, rec, tape_f, tape_w = run()
        gf, gw = backward(rec, c)
        gw_f, gb_f, _ = net_f.backward(tape_f, gf[None, :])
        gw_w, gb_w, _ = net_w.backward(tape_w, gw[None, :])
        grads = {"f": gw_f + gb_f, "w": gw_w + gb_w}
        nets = {"f": net_f, "w": net_w}

        stable = True
        probe_ok = True
        for _ in range(3):
            which = "f" if rng.uniform() < 0.5 else "w"
            params = nets[which].parameters()
            pi = int(rng.integers(0, len(params)))
            flat = params[pi].reshape(-1)
            if flat.size == 0:
                continue
            ci = int(rng.integers(0, flat.size))
            orig = flat[ci]
            flat[ci] = orig + fd_step
            loss_hi, state_hi = run()[:2]
            flat[ci] = orig - fd_step
            loss_lo, state_lo = run()[:2]
            flat[ci] = orig
            if state_hi != state0 or state_lo != state0:
                stable = False
                break
            fd = (loss_hi - loss_lo) / (2.0 * fd_step)
            an = float(grads[which][pi].reshape(-1)[ci])
            rel = abs(fd - an) / max(1.0, abs(fd), abs(an))
            worst_rel = max(worst_rel, rel)
            if rel > rel_tol:
                probe_ok = False
        if not stable:
            report.skipped += 1
            continue
        checked += 1
        if not probe_ok:
            mismatches += 1
    pass_frac = (checked - mismatches) / max(1, checked)
    report.total = checked
    report.stats = {"pass_frac": pass_frac, "worst_rel_err": worst_rel,
                    "skipped_unstable": report.skipped}
    if pass_frac < min_pass_frac:
        report.failures.append({"pass_frac": pass_frac, "mismatches": mismatches})
    return report


ALL_SUITES = {
    "feasibility": feasibility_suite,
    "projection-oracle": projection_oracle_suite,
    "gradients": gradient_suite,
    "pinv": pinv_suite,
    "combinatorics": lambda cases=0, seed=0: combinatorics_suite(),
}
