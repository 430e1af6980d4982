import numpy as np

from caffnet.rngs import make_rng
from caffnet.verify import (
    SuiteReport,
    feasibility_suite,
    gradient_suite,
    random_feasible_system,
)


def test_random_systems_are_feasible_and_varied():
    rng = make_rng(0, "gen-check")
    dims = set()
    for _ in range(200):
        sys, f, w = random_feasible_system(rng)
        dims.add((sys.m, sys.n_out))
        assert f.shape == (sys.n_out,) and w.shape == (sys.n_out,)
        # construction guarantees feasibility somewhere
        assert np.isfinite(sys.a_matrix).all() and np.isfinite(sys.b_vector).all()
    assert len(dims) > 15  # spans many (m, n_out) shapes


def test_suite_report_summary_lines():
    ok = SuiteReport("demo", 10, stats={"worst": 1e-12})
    assert "demo: pass" in ok.summary()
    bad = SuiteReport("demo", 10, failures=[{"case": 1}])
    assert "FAIL" in bad.summary()
    assert not bad.passed


def test_feasibility_suite_counts_and_stats():
    rep = feasibility_suite(cases=100, seed=5)
    assert rep.total == 100
    assert rep.passed
    assert rep.stats["min_feasible_candidates"] >= 1
    assert rep.stats["worst_output_violation"] <= 1e-9


def test_gradient_suite_excludes_unstable_probes():
    rep = gradient_suite(cases=40, seed=6)
    assert rep.total == 40
    assert rep.passed
    assert rep.stats["pass_frac"] >= 0.95
