import numpy as np
import pytest

from turnpike_mhe.cost import CostWeights
from turnpike_mhe.estimators import (
    WindowCache,
    ae_index_map,
    approximate_estimator,
    fie_reference,
    mhe_sequence,
    solve_window,
    write_estimate_csv,
)
from turnpike_mhe.system_model import (
    Box,
    ConstraintSets,
    DataBatch,
    LinearModel,
    batch_reactor_scenario,
)


def test_index_map_example():
    src = ae_index_map(10, 4)
    assert [tuple(r) for r in src[:3]] == [(0, 0), (0, 1), (0, 2)]
    assert [tuple(r) for r in src[3:8]] == [(1, 2), (2, 2), (3, 2), (4, 2), (5, 2)]
    assert [tuple(r) for r in src[8:]] == [(6, 2), (6, 3), (6, 4)]


@pytest.mark.parametrize("T,N", [(10, 4), (70, 20), (11, 2), (9, 8), (6, 6), (5, 0)])
def test_index_map_covers_each_index_once(T, N):
    src = ae_index_map(T, N)
    assert np.array_equal(src.sum(axis=1), np.arange(T + 1))
    assert len(set(src[:, 0])) == T - N + 1
    h = N // 2
    assert np.all(src[: h + 1, 0] == 0)
    assert np.all(src[T - h:, 0] == T - N)


@pytest.mark.parametrize("N", [3, 12])
def test_invalid_horizon(motivating, N):
    data = motivating.data.window(0, 10)
    with pytest.raises(ValueError):
        approximate_estimator(data, N, *motivating.args)


def test_non_additive_model_rejected():
    m = LinearModel([[1.0]], C=[[1.0]], E=[[2.0]])
    data = DataBatch(np.zeros((5, 0)), np.zeros((5, 1)))
    sets = ConstraintSets.unbounded(1, 0, 1, 1)
    with pytest.raises(ValueError):
        approximate_estimator(data, 2, m, sets, CostWeights.identity(1, 1))
    with pytest.raises(ValueError):
        mhe_sequence(data, 2, m, sets, CostWeights.identity(1, 1))


def test_full_window_equals_fie(motivating):
    ae = approximate_estimator(motivating.data, 70, *motivating.args)
    ref = motivating.reference.trajectory
    assert np.array_equal(ae.x_ae, ref.x)
    assert len(ae.windows) == 1


def test_ae_structure(motivating):
    ae = approximate_estimator(motivating.data, 20, *motivating.args, cache=motivating.cache)
    assert len(ae.windows) == 70 - 20 + 1
    # disturbances recovered from the stitched states make the trajectory feasible exactly
    x, w, u = ae.x_ae, ae.w_ae, motivating.data.u
    assert np.array_equal(x[1:], motivating.model.f_a(x[:-1], u[:-1]) + w)
    for j in (0, 10, 11, 35, 59, 60, 70):
        tau, off = ae.source[j]
        assert np.array_equal(ae.x_ae[j], ae.windows[(tau, 20)].trajectory.x[off])


def test_ae_and_mhe_share_terminal_state(reactor):
    ae = approximate_estimator(reactor.data, 20, *reactor.args, cache=reactor.cache)
    mh = mhe_sequence(reactor.data, 20, *reactor.args, cache=reactor.cache)
    assert np.array_equal(ae.x_ae[-1], mh.x_mhe[-1])


def test_mhe_equals_growing_fie(reactor):
    N = 10
    mh = mhe_sequence(reactor.data, N, *reactor.args, cache=reactor.cache)
    for t in range(N):
        fie = fie_reference(reactor.data.window(0, t), *reactor.args)
        assert np.array_equal(mh.x_mhe[t], fie.trajectory.x[-1])


def test_mhe_zero_noise():
    sc = batch_reactor_scenario(40)
    model = sc.model
    x = np.zeros((41, 2))
    x[0] = [3.0, 0.0]
    u = np.zeros((41, 2))
    for j in range(40):
        x[j + 1] = model.f_a(x[j], u[j])
    data = DataBatch(u, model.h(x, u))
    W = CostWeights.identity(2, 1)
    cache = WindowCache()
    mh = mhe_sequence(data, 8, model, sc.sets, W, cache=cache)
    assert np.max(np.abs(mh.x_mhe[8:] - x[8:])) <= 1e-6
    for rep in cache._store.values():
        assert rep.objective <= 1e-12


def test_mhe_tail_improves_with_horizon(motivating):
    # filtering reference: terminal states of the growing problems on d[0:t]
    ref = mhe_sequence(motivating.data, 70, *motivating.args, cache=motivating.cache).x_mhe
    errs = []
    for N in (5, 10, 15, 20):
        mh = mhe_sequence(motivating.data, N, *motivating.args, cache=motivating.cache)
        errs.append(np.max(np.abs(mh.x_mhe[20:] - ref[20:])))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_parallel_matches_serial(reactor):
    data = reactor.data.window(0, 40)
    serial = approximate_estimator(data, 20, *reactor.args)
    parallel = approximate_estimator(data, 20, *reactor.args, parallel=2)
    assert np.array_equal(serial.x_ae, parallel.x_ae)
    assert np.array_equal(serial.w_ae, parallel.w_ae)


def test_cache_does_not_change_results(reactor):
    data = reactor.data.window(10, 30)
    cache = WindowCache()
    a = approximate_estimator(data, 10, *reactor.args, cache=cache)
    b = approximate_estimator(data, 10, *reactor.args, cache=cache)
    c = approximate_estimator(data, 10, *reactor.args)
    assert cache.hits == 21
    assert np.array_equal(a.x_ae, b.x_ae) and np.array_equal(a.x_ae, c.x_ae)


def test_cache_keys_depend_on_data_and_config(reactor):
    k = WindowCache.key(0, 10, reactor.data, reactor.model, reactor.sets, reactor.weights, None)
    k2 = WindowCache.key(0, 10, reactor.data.window(0, 50), reactor.model, reactor.sets, reactor.weights, None)
    k3 = WindowCache.key(0, 10, reactor.data, reactor.model, reactor.sets, reactor.weights.scaled(2.0), None)
    assert len({k, k2, k3}) == 3


def test_window_bounds(motivating):
    with pytest.raises(IndexError):
        solve_window(motivating.data, 60, 20, *motivating.args)


def test_failed_window_raises(reactor):
    from turnpike_mhe.solver import SolverError, ToleranceConfig
    with pytest.raises(SolverError):
        solve_window(reactor.data, 10, 40, *reactor.args, tol=ToleranceConfig(max_iter=1))


def test_infeasible_sets_raise(reactor):
    from turnpike_mhe.solver import SolverError
    tight = ConstraintSets(reactor.sets.X, reactor.sets.U, Box.symmetric(1e-4, 2), Box.symmetric(1e-4, 1))
    with pytest.raises(SolverError):
        solve_window(reactor.data, 45, 10, reactor.model, tight, reactor.weights)


def test_estimate_csv(tmp_path, motivating):
    ae = approximate_estimator(motivating.data, 10, *motivating.args, cache=motivating.cache)
    path = tmp_path / "ae.csv"
    write_estimate_csv(path, ae.x_ae, ae.w_ae, ae.source)
    lines = path.read_text().splitlines()
    assert lines[0] == "j,x_0,w_0,source_tau,source_offset"
    assert len(lines) == 72
    last = lines[-1].split(",")
    assert last[0] == "70" and last[2] == "" and last[3:] == ["60", "10"]
