"""
Conjugate-gradient direction, backtracking and the full solver loop.
Run with: pytest test_rcg_solver.py
"""

import numpy as np
import pytest

from oracles import small_instance
from precoders.baselines import mrt_precoder
from precoders import rcg_solver
from precoders.errors import ConfigurationError, LineSearchFailure
from precoders.geometry import TangentVector, random_on_manifold, random_tangent
from precoders.hermitian import factorization_counter
from precoders.network_model import ClusterMap, generate_channels
from precoders.rcg_solver import (
    SolverOptions,
    Termination,
    backtrack,
    beta_modified_prp,
    rcg_solve,
    search_direction,
)
from precoders.wsr_objective import WsrObjective


def _instance(seed=0, **kw):
    config, channels, cluster, objective = small_instance(seed=seed, **kw)
    return config, channels, cluster, objective, random_on_manifold(config, cluster, seed)


def _gradient(objective, p):
    return objective.riemannian_gradient(p, objective.euclidean_gradient(objective.build_cache(p)))


def test_solver_options_defaults_and_validation():
    opts = SolverOptions()
    assert (opts.alpha0, opts.r, opts.c, opts.max_outer, opts.grad_tol) == (1e-3, 0.5, 1e-4, 500, 1e-6)
    with pytest.raises(ConfigurationError):
        SolverOptions(r=1.5)
    with pytest.raises(ConfigurationError):
        SolverOptions(c=0.0)
    with pytest.raises(ConfigurationError):
        SolverOptions(max_inner=0)
    config, *_ = _instance(alpha0=0.5, max_outer=7)
    assert SolverOptions.from_config(config).alpha0 == 0.5
    assert SolverOptions.from_config(config, max_outer=3).max_outer == 3


def test_beta_cases():
    _, _, _, objective, p = _instance()
    manifold = objective.manifold
    g = random_tangent(manifold, p, np.random.default_rng(0))
    gsq = manifold.metric(p, g, g)
    # no history
    assert beta_modified_prp(manifold, g, None, 0.0) == 0.0
    # <g, nu> < 0
    assert beta_modified_prp(manifold, g, TangentVector.from_stack(2.0 * g), gsq) == 0.0
    # beta_PRP = 2 > beta_FR = 1
    assert beta_modified_prp(manifold, g, TangentVector.from_stack(-g), gsq) == pytest.approx(1.0)
    # zero previous gradient restarts
    assert beta_modified_prp(manifold, g, g, 0.0) == 0.0


def test_search_direction_with_zero_beta_is_steepest_descent():
    _, _, _, objective, p = _instance()
    g = _gradient(objective, p)
    eta = search_direction(objective.manifold, g, None, 0.0, p, p, 0.0)
    for a, b in zip(eta.blocks, g.blocks):
        np.testing.assert_array_equal(a, -b)


def test_search_direction_is_tangent_descent_direction():
    for seed in range(20):
        _, _, _, objective, p = _instance(seed=seed, streams=2)
        manifold = objective.manifold
        rng = np.random.default_rng(seed)
        eta_prev = random_tangent(manifold, p, rng)
        p_new = manifold.retract(p, 0.05 * eta_prev)[0]
        g_new = _gradient(objective, p_new)
        for beta in (0.0, 0.5, 10.0):
            eta = search_direction(manifold, g_new, eta_prev, 0.05, p, None, beta)
            assert np.all(np.abs(manifold.tangency_residual(p_new, eta)) <= 1e-9)
            assert manifold.metric(p_new, eta, g_new) < 0


def test_backtrack_accepts_first_trial_when_sufficient():
    _, _, _, objective, p = _instance(seed=3)
    cache = objective.build_cache(p)
    g = objective.riemannian_gradient(p, objective.euclidean_gradient(cache))
    eta = TangentVector.from_stack(-g)
    slope = objective.manifold.metric(p, g, eta)
    opts = SolverOptions(alpha0=1e-6)
    step = backtrack(objective, p, eta, objective.with_direction(cache, p, eta), slope, opts)
    assert step.inner_iters == 1
    assert step.alpha == 1e-6
    assert objective.value(cache) - step.value >= opts.c * step.alpha * abs(slope)
    assert objective.manifold.is_feasible(step.point)


def test_monotone_and_feasible_over_seeded_runs():
    violations = 0
    for seed in range(50):
        kw = dict(num_bs=3, num_ut=3, mt=2, streams=1 + seed % 2, bsc=1 + seed % 3)
        config, channels, cluster, objective = small_instance(seed=seed, **kw)
        p0 = mrt_precoder(channels, cluster, config)
        values = []

        def check(n, p, cache):
            nonlocal violations
            values.append(objective.value(cache))
            res = np.abs(objective.manifold.feasibility_residual(p))
            if np.any(res > 1e-9 * objective.manifold.bs_power):
                violations += 1
            g = objective.riemannian_gradient(p, objective.euclidean_gradient(cache))
            if np.any(np.abs(objective.manifold.tangency_residual(p, g)) > 1e-9):
                violations += 1

        _, trace = rcg_solve(objective, p0, SolverOptions(max_outer=30), callback=check)
        assert np.all(np.diff(values) <= 0)
        assert np.all(np.diff(trace.f_values()) <= 0)
    assert violations == 0


def test_converges_on_small_instance():
    config, channels, cluster, objective = small_instance(
        num_bs=2, num_ut=2, mt=2, mr=1, streams=1, bsc=2, seed=0, noise=1.0, pathloss_exp=0.0,
    )
    p0 = mrt_precoder(channels, cluster, config)
    p, trace = rcg_solve(objective, p0, SolverOptions(alpha0=1.0, max_outer=500, grad_tol=1e-6))
    assert trace.termination is Termination.GRAD_TOL
    assert trace.final.grad_norm <= 1e-6
    assert trace.final.wsr >= trace.records[0].wsr


def test_never_worse_than_mrt_start():
    for seed in range(10):
        config, channels, cluster, objective = small_instance(seed=seed, num_ut=4, streams=2)
        p0 = mrt_precoder(channels, cluster, config)
        start = objective.wsr(objective.build_cache(p0))
        p, trace = rcg_solve(objective, p0, SolverOptions(max_outer=50))
        assert objective.wsr(objective.build_cache(p)) >= start
        assert trace.final.wsr == pytest.approx(objective.wsr(objective.build_cache(p)), rel=1e-10)


def test_full_cluster_run_equals_conventional_network_run():
    config, channels, cluster, objective = small_instance(num_bs=3, num_ut=3, bsc=3, seed=12, streams=2)
    full = ClusterMap.full(3, 3)
    conventional = WsrObjective.from_config(config, channels, full)
    opts = SolverOptions(max_outer=25)

    p_ucn, trace_ucn = rcg_solve(objective, mrt_precoder(channels, cluster, config), opts)
    p_net, trace_net = rcg_solve(conventional, mrt_precoder(channels, full, config), opts)
    assert np.array_equal(trace_ucn.f_values(), trace_net.f_values())
    assert [r.alpha for r in trace_ucn.records] == [r.alpha for r in trace_net.records]
    for a, b in zip(p_ucn.blocks, p_net.blocks):
        assert np.array_equal(a, b)


def test_singleton_clusters_touch_one_bs_per_user():
    config, channels, cluster, objective, p = _instance(num_bs=3, num_ut=4, bsc=1)
    egrad = objective.euclidean_gradient(objective.build_cache(p))
    for i in range(4):
        assert p.blocks[i].shape[0] == 1
        assert egrad.blocks[i].shape[0] == 1
        assert cluster.slots[i] == cluster.serving[i]


def test_no_large_factorizations_inside_iterations():
    config, channels, cluster, objective = small_instance(num_bs=3, num_ut=4, mt=4, mr=2, streams=2, seed=1)
    p0 = mrt_precoder(channels, cluster, config)
    with factorization_counter() as seen:
        rcg_solve(objective, p0, SolverOptions(max_outer=10))
    assert seen
    assert max(order for _, order in seen) <= max(config.mr, max(config.streams))
    assert {kind for kind, _ in seen} == {"cholesky"}


def test_mean_inner_iterations_with_default_knobs():
    inner = []
    for seed in range(5):
        config, channels, cluster, objective = small_instance(seed=seed, num_ut=4, streams=2)
        _, trace = rcg_solve(objective, mrt_precoder(channels, cluster, config), SolverOptions(max_outer=40))
        inner.extend(r.inner_iters for r in trace.records[1:])
    assert inner and np.mean(inner) < 10


def test_line_search_failure_stops_gracefully():
    _, _, _, objective, p = _instance(seed=2)
    p_out, trace = rcg_solve(objective, p, SolverOptions(alpha0=1e12, max_inner=1))
    assert trace.termination is Termination.LINE_SEARCH
    assert trace.outer_iterations == 0
    for a, b in zip(p_out.blocks, p.blocks):
        assert np.array_equal(a, b)


def test_zero_iterations_returns_start():
    _, _, _, objective, p = _instance()
    p_out, trace = rcg_solve(objective, p, SolverOptions(max_outer=0))
    assert trace.termination is Termination.MAX_OUTER
    assert len(trace.records) == 1
    assert p_out is p


def test_failed_conjugate_search_is_charged_to_the_restarted_iteration(monkeypatch):
    real_backtrack = rcg_solver.backtrack
    exercised = 0
    for seed in range(10):
        calls, accepted = [], []

        def second_search_fails(objective, p, eta, cache, slope, opts, f0=None):
            calls.append(len(calls))
            if len(calls) == 2:
                raise LineSearchFailure(opts.max_inner, opts.alpha0)
            step = real_backtrack(objective, p, eta, cache, slope, opts, f0=f0)
            accepted.append(step.inner_iters)
            return step

        monkeypatch.setattr(rcg_solver, "backtrack", second_search_fails)
        config, channels, cluster, objective = small_instance(seed=seed, num_ut=3, streams=2)
        opts = SolverOptions(max_outer=2, max_inner=7)
        _, trace = rcg_solve(objective, mrt_precoder(channels, cluster, config), opts)
        if trace.outer_iterations < 2:
            # beta was zero at the second search, so the failure ended the run
            continue
        exercised += 1
        assert trace.records[2].restarted
        assert trace.records[2].inner_iters == accepted[1] + 7
        assert trace.total_inner == sum(accepted) + 7
    assert exercised > 0
