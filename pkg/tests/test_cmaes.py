import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beltcodesign.cmaes import (
    LOG_COLUMNS,
    PENALTY,
    CmaesConfig,
    CmaesResult,
    CmaesState,
    minimize,
    penalized_fitness,
    read_generation_log,
    write_generation_log,
)

WIDE = dict(bounds_lo=(-5.0,) * 4, bounds_hi=(5.0,) * 4)


def run_sphere(seed, generations=200, population=20):
    state = CmaesState(CmaesConfig(population=population, generations=generations, seed=seed, **WIDE))
    # optimum off-centre so the mean has to travel
    target = np.array([1.0, -2.0, 0.5, 3.0])
    best = []
    for _ in range(generations):
        X = state.ask()
        f = np.sum((X - target) ** 2, axis=1)
        state.tell(f)
        best.append(state.best_f)
        if state.best_f < 1e-8:
            break
    return state, best


def test_strategy_parameters_match_reference_values():
    # independent evaluation of the standard defaults for n = 4, lambda = 20
    s = CmaesState(CmaesConfig(population=20))
    raw = [math.log(10.5) - math.log(i) for i in range(1, 11)]
    w = [r / sum(raw) for r in raw]
    mueff = 1 / sum(v * v for v in w)
    assert s.mu == 10
    assert s.mueff == pytest.approx(mueff, rel=1e-12)
    assert s.mueff == pytest.approx(5.938, abs=1e-3)
    assert s.cs == pytest.approx((mueff + 2) / (4 + mueff + 5), rel=1e-12)
    assert s.c1 == pytest.approx(2 / (5.3**2 + mueff), rel=1e-12)
    assert s.chi_n == pytest.approx(2 * (1 - 1 / 16 + 1 / 336), rel=1e-12)


def test_sphere_converges():
    state, best = run_sphere(0)
    assert best[-1] < 1e-8
    assert len(best) <= 200


def test_seeded_runs_are_bitwise_reproducible():
    a, ha = run_sphere(7, generations=40)
    b, hb = run_sphere(7, generations=40)
    assert ha == hb
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.C, b.C)
    c, hc = run_sphere(8, generations=40)
    assert hc != ha


def test_flat_fitness_keeps_mean():
    state = CmaesState(CmaesConfig(population=20))
    mean0 = state.mean.copy()
    for _ in range(10):
        state.ask()
        state.tell(np.full(20, PENALTY))
    np.testing.assert_array_equal(state.mean, mean0)
    assert np.all(np.isfinite(state.C)) and np.isfinite(state.sigma) and state.sigma > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_covariance_stays_symmetric_positive_definite(seed, gens):
    rng = np.random.default_rng(seed)
    state = CmaesState(CmaesConfig(population=8, seed=seed))
    A = rng.normal(size=(4, 4))
    for _ in range(gens):
        X = state.ask()
        # ill-conditioned quadratic with occasional ties
        f = np.round(np.sum((X @ A) ** 2, axis=1), 1)
        state.tell(f)
    C = state.covariance
    np.testing.assert_allclose(C, C.T, atol=1e-12 * np.abs(C).max())
    assert np.linalg.eigvalsh(C).min() > 0


def test_tell_validates_input():
    state = CmaesState(CmaesConfig(population=10))
    with pytest.raises(RuntimeError):
        state.tell(np.zeros(10))
    state.ask()
    with pytest.raises(ValueError):
        state.tell(np.zeros(9))
    with pytest.raises(ValueError):
        state.tell(np.r_[np.zeros(9), np.nan])


@pytest.mark.parametrize("kw", [{"population": 3}, {"generations": 0}, {"sigma0": 0}, {"bounds_lo": (1, 1, 1, 9), "bounds_hi": (9, 9, 3, 3)}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CmaesConfig(**kw)


def test_config_round_trip():
    cfg = CmaesConfig(population=12, generations=3, seed=4, mean0=(6, 3, 1, 1))
    assert CmaesConfig.from_dict(cfg.to_dict()) == cfg


def test_injected_design_is_sampled_first():
    state = CmaesState(CmaesConfig(population=20))
    state.inject([6.0, 3.0, 1.0, 1.0])
    X = state.ask()
    np.testing.assert_allclose(X[0], [6.0, 3.0, 1.0, 1.0], atol=1e-12)


# --- penalised fitness ------------------------------------------------------


def must_not_run(g):
    raise AssertionError("inner evaluated for an invalid design")


@pytest.mark.parametrize(
    "g",
    [[3, 5, 1, 1], [6, 6, 1, 1], [6, 3, 4, 1], [0.5, 0.4, 0.3, 1], [6, 3, 1, 0.9], [10, 3, 1, 1], [6, 3, 1, np.nan]],
)
def test_invalid_designs_get_exact_penalty(g):
    assert penalized_fitness(g, must_not_run) == 1e6


def test_feasible_inner_returns_cost():
    assert penalized_fitness([9, 5.62, 3, 1.8], lambda g: 66.77) == 66.77
    assert penalized_fitness([9, 5.62, 3, 1.8], lambda g: (50.99, True, "converged")) == 50.99


@pytest.mark.parametrize("out", [(3.0, False), (np.inf, True), (None, True), (np.nan, True)])
def test_failed_inner_gets_penalty(out):
    assert penalized_fitness([6, 3, 1, 1], lambda g: out) == PENALTY


def test_inner_exception_gets_penalty():
    def boom(g):
        raise FloatingPointError("blow-up")

    assert penalized_fitness([6, 3, 1, 1], boom) == PENALTY


# --- driver -----------------------------------------------------------------


def bowl(g):
    return float(np.sum((np.asarray(g) - [7, 4, 2, 2]) ** 2))


def test_minimize_best_so_far_monotone_and_logged():
    cfg = CmaesConfig(population=10, generations=8, seed=3)
    res = minimize(bowl, cfg, inject=[[6, 3, 1, 1]])
    assert len(res.best_so_far) == 8
    assert np.all(np.diff(res.best_so_far) <= 0)
    assert res.best.fitness == res.best_so_far[-1] == min(r["fitness"] for r in res.log)
    assert res.best_so_far[0] <= bowl([6, 3, 1, 1])
    assert res.evaluations == len(res.log) == 80
    assert all(r["fitness"] == PENALTY for r in res.log if not r["feasible"])
    assert CmaesResult.from_dict(res.to_dict()).best.fitness == res.best.fitness


def test_minimize_is_reproducible():
    cfg = CmaesConfig(population=10, generations=5, seed=11)
    assert minimize(bowl, cfg).log == minimize(bowl, cfg).log


def test_generation_log_csv_round_trip():
    res = minimize(bowl, CmaesConfig(population=6, generations=2, seed=0))
    text = write_generation_log(res.log)
    assert text.splitlines()[0] == ",".join(LOG_COLUMNS)
    assert read_generation_log(text) == res.log


def test_generation_log_rejects_wrong_header():
    with pytest.raises(ValueError):
        read_generation_log("a,b\n1,2\n")
