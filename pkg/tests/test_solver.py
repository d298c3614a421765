import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import linear_lsq_oracle
from turnpike_mhe.cost import CostWeights, EstimateTrajectory, total_cost
from turnpike_mhe.solver import (
    CONVERGED,
    INFEASIBLE,
    MAX_ITER,
    ProblemSpec,
    ToleranceConfig,
    default_initializer,
    kkt_residual,
    solve,
    warm_start_from,
)
from turnpike_mhe.system_model import (
    BatchReactor,
    DataBatch,
    batch_reactor_scenario,
    motivating_scenario,
    simulate,
)


def spec_for(inst, tau=0, N=None, **kw):
    N = inst.data.T - tau if N is None else N
    return ProblemSpec(inst.data.window(tau, N), *inst.args, tau=tau, **kw)


def noise_free_reactor(T=30):
    sc = batch_reactor_scenario(T)
    model = sc.model
    x = np.zeros((T + 1, 2))
    x[0] = [3.0, 0.0]
    u = np.zeros((T + 1, 2))
    for j in range(T):
        x[j + 1] = model.f_a(x[j], u[j])
    return sc, x, DataBatch(u, model.h(x, u))


class TestMotivatingInstance:
    def test_matches_oracle_short_horizon(self):
        sim = simulate(motivating_scenario(10))
        sc = motivating_scenario(10)
        rep = solve(ProblemSpec(sim.data, sc.model, sc.sets, CostWeights.identity(1, 1)))
        x, w = linear_lsq_oracle(sc.model, sim.data, 1, 1, 1)
        assert rep.status == CONVERGED
        assert np.max(np.abs(rep.trajectory.x - x)) <= 1e-6
        assert np.max(np.abs(rep.trajectory.w - w)) <= 1e-6

    def test_pinned_segment_matches_full_solution(self, motivating):
        ref = motivating.reference.trajectory
        spec = spec_for(motivating, 2, 5, pin_initial=ref.x[2], pin_terminal=ref.x[7])
        rep = solve(spec)
        assert np.max(np.abs(rep.trajectory.x - ref.x[2:8])) <= 1e-6
        assert np.max(np.abs(rep.trajectory.w - ref.w[2:7])) <= 1e-6

    def test_pinned_matches_pinned_oracle(self, motivating):
        xi, xt = np.array([0.0]), np.array([30.0])
        rep = solve(spec_for(motivating, 10, 12, pin_initial=xi, pin_terminal=xt))
        x, w = linear_lsq_oracle(motivating.model, motivating.data.window(10, 12), 1, 1, 1, xi, xt)
        assert np.max(np.abs(rep.trajectory.x - x)) <= 1e-6
        assert rep.trajectory.x[0, 0] == 0.0 and rep.trajectory.x[-1, 0] == 30.0

    def test_kkt_residual_of_oracle(self, motivating):
        x, w = linear_lsq_oracle(motivating.model, motivating.data, 1, 1, 1)
        assert kkt_residual(spec_for(motivating), EstimateTrajectory(x, w)) <= 1e-8

    def test_perturbed_optimum_is_not_stationary(self, motivating):
        t = motivating.reference.trajectory
        x = t.x.copy()
        x[30] += 0.1
        assert kkt_residual(spec_for(motivating), EstimateTrajectory(x, t.w)) > 1e-3

    def test_scale_robustness(self, motivating):
        base = motivating.reference.trajectory
        W10 = motivating.weights.scaled(10.0)
        rep = solve(ProblemSpec(motivating.data, motivating.model, motivating.sets, W10))
        assert np.max(np.abs(rep.trajectory.x - base.x)) <= 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_optimality_dominance(self, motivating, seed):
        rng = np.random.default_rng(seed)
        rep = motivating.reference
        V = rep.objective
        for _ in range(5):
            x0 = rng.normal(1.0, 2.0, size=1)
            w = rep.trajectory.w + rng.normal(scale=rng.uniform(0.01, 1.0), size=rep.trajectory.w.shape)
            x = np.concatenate([x0, x0 + np.cumsum(w[:, 0])])[:, None]
            J = total_cost(motivating.weights, EstimateTrajectory(x, w), motivating.data, motivating.model)
            assert J >= V - 1e-6 * (1 + V)

    def test_degenerate_horizon(self, motivating):
        rep = solve(spec_for(motivating, 5, 0))
        assert rep.status == CONVERGED
        assert rep.trajectory.x[0, 0] == pytest.approx(motivating.data.y[5, 0], abs=1e-10)
        assert rep.objective <= 1e-16


class TestReactor:
    def test_zero_noise_recovers_truth(self):
        sc, x, data = noise_free_reactor()
        rep = solve(ProblemSpec(data, sc.model, sc.sets, CostWeights.identity(2, 1)))
        assert rep.status == CONVERGED
        assert rep.objective <= 1e-12
        assert np.max(np.abs(rep.trajectory.w)) <= 1e-6
        assert kkt_residual(ProblemSpec(data, sc.model, sc.sets, CostWeights.identity(2, 1)),
                            EstimateTrajectory(x, np.zeros((30, 2)))) <= 1e-8

    def test_converged_report_invariants(self, reactor):
        for tau in (0, 20, 55):
            spec = spec_for(reactor, tau, 40)
            rep = solve(spec)
            assert rep.status == CONVERGED
            assert rep.kkt_residual <= 1e-8
            assert rep.constraint_violation <= 1e-8
            assert rep.objective == pytest.approx(
                total_cost(reactor.weights, rep.trajectory, spec.data, reactor.model), rel=1e-10)
            assert rep.trajectory.is_feasible(reactor.model, spec.data)
            assert np.all(np.abs(rep.trajectory.w) <= 0.05 + 1e-8)
            r = spec.data.y - reactor.model.h(rep.trajectory.x, spec.data.u)
            assert np.all(np.abs(r) <= 0.5 + 1e-8)
            assert kkt_residual(spec, rep.trajectory) <= 1e-7

    def test_merit_is_monotone(self, reactor):
        rep = solve(spec_for(reactor, 10, 40))
        assert rep.merit_history
        for mu, nu, phi0, phit in rep.merit_history:
            assert phit <= phi0 + 1e-12 * (1 + abs(phi0))

    def test_deterministic(self, reactor):
        a, b = solve(spec_for(reactor, 30, 20)), solve(spec_for(reactor, 30, 20))
        assert np.array_equal(a.trajectory.x, b.trajectory.x)

    def test_optimality_dominance(self, reactor, rng):
        spec = spec_for(reactor, 0, 40)
        rep = solve(spec)
        V = rep.objective
        model, data = reactor.model, spec.data
        tested = 0
        while tested < 100:
            x = rep.trajectory.x.copy()
            x[0] += rng.normal(scale=0.05, size=2)
            w = np.clip(rep.trajectory.w + rng.normal(scale=0.02, size=rep.trajectory.w.shape), -0.05, 0.05)
            for j in range(40):
                x[j + 1] = model.f(x[j], data.u[j], w[j])
            r = data.y - model.h(x, data.u)
            if np.any(np.abs(r) > 0.5):
                continue
            tested += 1
            assert total_cost(reactor.weights, EstimateTrajectory(x, w), data, model) >= V - 1e-6 * (1 + V)

    def test_infeasible_pins(self, reactor):
        spec = spec_for(reactor, 0, 2, pin_initial=np.array([3.0, 0.0]), pin_terminal=np.array([0.0, 0.0]))
        assert solve(spec).status == INFEASIBLE

    def test_max_iter_is_flagged(self, reactor):
        rep = solve(spec_for(reactor, 10, 40), tol=ToleranceConfig(max_iter=2))
        assert rep.status == MAX_ITER and not rep.converged

    def test_pins_outside_state_set(self):
        from turnpike_mhe.system_model import Box, ConstraintSets
        sc = batch_reactor_scenario(10)
        sets = ConstraintSets(Box(np.zeros(2), np.full(2, 4.0)), sc.sets.U, sc.sets.W, sc.sets.V)
        with pytest.raises(ValueError):
            ProblemSpec(simulate(sc).data, sc.model, sets, CostWeights.identity(2, 1), pin_initial=[-1.0, 0.0])


class TestWarmStart:
    def test_full_overlap(self, reactor):
        rep = solve(spec_for(reactor, 20, 10))
        init = warm_start_from(rep.trajectory, spec_for(reactor, 20, 10))
        assert np.array_equal(init.x, rep.trajectory.x) and np.array_equal(init.w, rep.trajectory.w)

    def test_no_overlap(self, reactor):
        rep = solve(spec_for(reactor, 0, 10))
        spec = spec_for(reactor, 50, 10)
        init, base = warm_start_from(rep.trajectory, spec), default_initializer(spec)
        assert np.array_equal(init.x, base.x) and np.array_equal(init.w, base.w)

    def test_one_step_extension(self, reactor):
        rep = solve(spec_for(reactor, 20, 10))
        spec = spec_for(reactor, 21, 10)
        init = warm_start_from(rep.trajectory, spec)
        assert np.array_equal(init.x[:10], rep.trajectory.x[1:])
        expected = BatchReactor().f_a(init.x[9], spec.data.u[9])
        assert np.array_equal(init.x[10], expected)
        assert np.all(init.w[9] == 0.0)

    def test_warm_start_reaches_same_solution(self, reactor):
        cold = solve(spec_for(reactor, 21, 30))
        prev = solve(spec_for(reactor, 20, 30))
        warm = solve(spec_for(reactor, 21, 30), init=warm_start_from(prev.trajectory, spec_for(reactor, 21, 30)))
        assert np.max(np.abs(warm.trajectory.x - cold.trajectory.x)) <= 1e-6
