"""Selective stabilization: policies, density thresholds, mixed bounds."""

import math

import numpy as np
import pytest

from rbstab.distributions import (
    AffineBeta,
    Fixed,
    LogBeta,
    ParamDistribution,
    Uniform,
    make_weight,
    pointwise_errors,
)
from rbstab.problems import build_graetz, truth_solve
from rbstab.rb import greedy
from rbstab.selective import (
    NU_GRID,
    StabilizationPolicy,
    decide_stabilize,
    density_threshold_from_nu,
    estimate_mixed_mean_error,
    offline_only_bound,
    sweep_density_threshold,
    sweep_parameter_threshold,
    tune_nu,
)

# sec-3.3.1-style setup on a coarse mesh: mu1 log-Beta over five decades,
# geometry pinned at one
SELECTIVE_DIST = ParamDistribution([LogBeta(1.0, 5.0, 5.0, 3.0), Fixed(1.0)])


@pytest.fixture(scope="module")
def graetz_small():
    return build_graetz(16, 8, domain=((10.0, 1e6), (0.5, 4.0)))


@pytest.fixture(scope="module")
def trained(graetz_small):
    xi = SELECTIVE_DIST.sample(80, seed=0)
    space, trace = greedy(graetz_small, xi, tol=0.0, n_max=10,
                          weight=make_weight(SELECTIVE_DIST))
    return space, trace


# -------------------------------------------------------------------- policies

def test_policy_always_and_never():
    mu = np.array([1e4, 1.0])
    assert decide_stabilize(StabilizationPolicy.always(), mu)
    assert not decide_stabilize(StabilizationPolicy.never(), mu)


def test_parameter_threshold_policy():
    pol = StabilizationPolicy.parameter_threshold(0, 1e3)
    assert decide_stabilize(pol, np.array([1e4, 1.0]))
    assert not decide_stabilize(pol, np.array([1e2, 1.0]))


def test_density_policy_tail_fraction():
    pol = StabilizationPolicy.density_threshold(SELECTIVE_DIST, 0.1,
                                                n_mc=100_000, seed=1)
    mus = SELECTIVE_DIST.sample_uniform(20_000, seed=2, mode="base")
    frac = np.mean([not decide_stabilize(pol, mu, SELECTIVE_DIST)
                    for mu in mus])
    assert 0.40 <= frac <= 0.55          # paper-scale tail: about 45-48%


# ------------------------------------------------------------ density threshold

def test_density_threshold_edges():
    assert density_threshold_from_nu(SELECTIVE_DIST, 0.0) == 0.0
    assert math.isinf(density_threshold_from_nu(SELECTIVE_DIST, 1.0))


def test_density_threshold_matches_exact_quantile():
    # exact two-sided quantiles of the Beta(5, 3) density under itself
    exact = {0.001: 0.02858, 0.002: 0.04806, 0.01: 0.15690, 0.02: 0.25763,
             0.1: 0.77105}
    for nu, val in exact.items():
        c = density_threshold_from_nu(SELECTIVE_DIST, nu, n_mc=400_000, seed=3)
        assert abs(c - val) / val < 0.08, (nu, c, val)


def test_density_threshold_flat_density_jump():
    # flat density: the threshold jumps from 0 to the constant level as soon
    # as nu > 0 (every point is in the tail at the constant density value)
    dist = ParamDistribution([Uniform(0.0, 2.0)])
    c_small = density_threshold_from_nu(dist, 0.01, n_mc=50_000, seed=4)
    assert c_small >= 1.0  # constant base density equals 1
    assert density_threshold_from_nu(dist, 0.0) == 0.0


def test_policy_monotonicity(trained):
    space, _ = trained
    mus = SELECTIVE_DIST.sample_uniform(2000, seed=5, mode="base")
    fractions = []
    for nu in (0.001, 0.01, 0.05, 0.1):
        pol = StabilizationPolicy.density_threshold(SELECTIVE_DIST, nu,
                                                    n_mc=100_000, seed=6)
        fractions.append(np.mean([not decide_stabilize(pol, mu, SELECTIVE_DIST)
                                  for mu in mus]))
    assert all(a <= b + 1e-12 for a, b in zip(fractions, fractions[1:]))
    thr_fracs = []
    for thr in (1e1, 1e2, 1e3, 1e4):
        pol = StabilizationPolicy.parameter_threshold(0, thr)
        thr_fracs.append(np.mean([not decide_stabilize(pol, mu)
                                  for mu in mus]))
    assert all(a <= b + 1e-12 for a, b in zip(thr_fracs, thr_fracs[1:]))


# ------------------------------------------------------------ offline-only bound

def test_offline_only_bound_reduces_to_eps_star(graetz_small):
    """With a vanishing advection field the bound collapses to epsilon*."""
    from rbstab.rb import ReducedSpace

    space = ReducedSpace(graetz_small)
    mu = np.array([1e2, 1.0])
    u = truth_solve(graetz_small, mu, stabilized=True)

    class NoAdvection:
        def __getattr__(self, name):
            return getattr(graetz_small, name)

        def streamline_norm_sq(self, mu, u):
            return 0.0

        def beta_linf(self, mu):
            return 0.0

    bound = offline_only_bound(NoAdvection(), space, mu, eps_star=0.5, u_truth=u)
    assert np.isclose(bound, 0.5)


def test_offline_only_bound_zero_for_constant_field(graetz_small):
    from rbstab.rb import ReducedSpace

    space = ReducedSpace(graetz_small)
    mu = np.array([1e2, 1.0])
    const = np.ones(graetz_small.mesh.n_nodes)
    bound = offline_only_bound(graetz_small, space, mu, eps_star=0.0,
                               u_truth=const)
    assert bound <= 1e-10


def test_offline_only_bound_dominates_measured_error(graetz_small, trained):
    space, trace = trained
    mu = np.array([1e2, 1.0])
    err = pointwise_errors(space, mu[None, :], False)[0]
    eps_star = trace.final_max_estimator
    bound = offline_only_bound(graetz_small, space, mu, eps_star)
    assert bound >= err


# ------------------------------------------------------------------ mixed bound

def test_mixed_bound_and_tune_nu(trained):
    space, trace = trained
    eps_star = trace.final_max_estimator
    test_mus = SELECTIVE_DIST.sample(60, seed=7)
    cache: dict = {}
    pol = StabilizationPolicy.density_threshold(SELECTIVE_DIST, 0.002,
                                                n_mc=100_000, seed=8)
    bound = estimate_mixed_mean_error(space, SELECTIVE_DIST, pol, test_mus,
                                      eps_star, truth_cache=cache)
    flags = [decide_stabilize(pol, mu, SELECTIVE_DIST) for mu in test_mus]
    errs = pointwise_errors(space, test_mus, flags, truth_cache=None)
    assert np.mean(errs) <= bound + 1e-12

    nu, ok = tune_nu(space, SELECTIVE_DIST, e_tilde=1e9, test_mus=test_mus,
                     eps_star=eps_star, n_mc=100_000, seed=8,
                     truth_cache=cache)
    assert ok and nu == max(NU_GRID)
    nu, ok = tune_nu(space, SELECTIVE_DIST, e_tilde=0.0, test_mus=test_mus,
                     eps_star=eps_star, n_mc=100_000, seed=8,
                     truth_cache=cache)
    assert not ok and nu == 0.0


# --------------------------------------------------------------------- sweeps

def test_sweeps_monotone_fraction_and_degenerate_rows(trained):
    space, _ = trained
    mus = SELECTIVE_DIST.sample_uniform(200, seed=9, mode="base")
    weights = SELECTIVE_DIST.base_density(mus)
    cache: dict = {}
    rows = sweep_parameter_threshold(space, mus, weights,
                                     [0.0, 1e1, 1e2, 1e3, 1e6], component=0,
                                     truth_cache=cache)
    fracs = [r[2] for r in rows]
    assert fracs[0] == 0.0 and fracs[-1] == 1.0
    assert all(a <= b + 1e-12 for a, b in zip(fracs, fracs[1:]))

    drows = sweep_density_threshold(space, SELECTIVE_DIST, mus, weights,
                                    [0.0, 0.01, 0.1], n_mc=100_000, seed=10,
                                    truth_cache=cache)
    dfracs = [r[3] for r in drows]
    assert dfracs[0] == 0.0
    assert all(a <= b + 1e-12 for a, b in zip(dfracs, dfracs[1:]))

    # degenerate consistency: threshold below the support reproduces the
    # always-stabilized errors, above the support the never-stabilized ones
    err_always = np.mean(weights * pointwise_errors(space, mus, True, cache))
    err_never = np.mean(weights * pointwise_errors(space, mus, False, cache))
    assert np.isclose(rows[0][1], err_always)
    assert np.isclose(rows[-1][1], err_never)
