import numpy as np
import pytest

from coupled_opt import (EngineError, InvariantViolation, Network, RunState, Schedule, build_complete,
                         build_ring_plus, default_rho, project_Y, run, run_subgradient_baseline, solve_local, spectral,
                         step)
from coupled_opt import engine as engine_mod
from coupled_opt.engine import bound_optimal_rho, check_invariants, default_step_c
from coupled_opt.local_solver import LocalOracle, solve_agents

from conftest import make_instance


# projection and schedule ----------------------------------------------------------

def test_project_examples():
    np.testing.assert_array_equal(project_Y(np.array([1.0, 2.0, 3.0]), 1), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(project_Y(np.array([0.0, -1.0, 2.0]), 1), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(project_Y(np.array([-5.0, -5.0]), 1), [-5.0, 0.0])


def test_schedule_values_and_identities():
    s = Schedule(rho=0.3, N=50, l_g=2.0, norm_W=4.0)
    assert s.alpha(1) == 1.0
    for k in range(1, 51):
        s.check(k)
        assert s.theta(k) * s.beta(k) == pytest.approx(0.09, rel=1e-12)
        assert s.alpha(k) == 2 / (k + 1)
        assert s.eta(k) == pytest.approx((4.0 + 0.3 * 50 * 4.0) / k)
    assert all(s.eta(k + 1) < s.eta(k) for k in range(1, 50))
    with pytest.raises(ValueError, match="horizon"):
        s.check(51)


@pytest.mark.parametrize("kw, key", [({"rho": 0.0}, "rho"), ({"N": 0}, "N")])
def test_schedule_preconditions(kw, key):
    args = dict(rho=1.0, N=10, l_g=1.0, norm_W=1.0) | kw
    with pytest.raises(ValueError, match=key):
        Schedule(**args)


def test_rho_helpers():
    assert default_rho(4.0, 1200) == pytest.approx(1 / 4800)
    assert bound_optimal_rho(2.0, 4.0, 1.0) == pytest.approx(0.25)


def test_invariant_checker_catches_drift():
    st = RunState(y=np.zeros((2, 2)), yhat=np.zeros((2, 2)), ytilde=np.zeros((2, 2)),
                  lam=np.array([[1.0, 0.0], [0.0, 0.0]]), x=np.zeros((2, 1)))
    with pytest.raises(InvariantViolation, match="sum to zero"):
        check_invariants(st, 1)
    st.lam[:] = 0
    st.y[0, 1] = -1e-300
    with pytest.raises(InvariantViolation, match="negative"):
        check_invariants(st, 1)


# single steps --------------------------------------------------------------------

def pair_network():
    return Network.from_edges(2, [(0, 1)])


def test_two_rounds_by_hand(hand2):
    """Straight-line transcription of the update equations for the n=2, p=1 problem."""
    rho, N = 0.5, 3
    H = np.array([[1.0, -1.0], [-1.0, 1.0]])
    l_g, normW = np.sqrt(2 / 4), 2.0
    # f_i = x^2 - 2 i x, B = 1, b = 0: argmin of f_i + y x is x = i - y/2 (box inactive)
    xresp = lambda y: np.array([1.0, 2.0]) - y / 2
    y = np.zeros(2); yhat = y.copy(); lam = np.zeros(2)
    expected = []
    for k in (1, 2):
        a = 2 / (k + 1)
        yt = (1 - a) * yhat + a * y
        grad = -xresp(yt)
        eta = (2 * l_g + rho * N * normW) / k
        y_new = y - (grad - lam + rho * N / k * (H @ y)) / eta
        yhat = (1 - a) * yhat + a * y_new
        lam = lam - rho * k / N * (H @ y_new)
        y = y_new
        expected.append((y.copy(), yhat.copy(), lam.copy(), xresp(yt)))

    sched = Schedule(rho, N, hand2.l_g, spectral(pair_network()).norm_W)
    state = RunState.initial(hand2)
    with LocalOracle(hand2) as oracle:
        for k in (1, 2):
            state = step(state, sched, hand2, pair_network(), oracle, inner_tol=1e-13)
            ey, eyh, elam, ex = expected[k - 1]
            np.testing.assert_allclose(state.y[:, 0], ey, atol=1e-11)
            np.testing.assert_allclose(state.yhat[:, 0], eyh, atol=1e-11)
            np.testing.assert_allclose(state.lam[:, 0], elam, atol=1e-11)
            np.testing.assert_allclose(state.x[:, 0], ex, atol=1e-11)
    assert state.k == 3


def test_first_round_collapse(tiny_instance, ring3):
    # alpha_1 = 1: ytilde_1 = y_1 whatever yhat_1 holds, and yhat_2 = y_2
    sched = Schedule(0.1, 5, tiny_instance.l_g, spectral(ring3).norm_W)
    st = RunState.initial(tiny_instance)
    st.yhat = project_Y(np.full_like(st.y, 7.0), tiny_instance.d)
    with LocalOracle(tiny_instance) as oracle:
        nxt = step(st, sched, tiny_instance, ring3, oracle)
    np.testing.assert_array_equal(nxt.ytilde, st.y)
    np.testing.assert_array_equal(nxt.yhat, nxt.y)


def _uncoupled():
    return make_instance([{"A": np.eye(2), "c": [1.0, -1.0], "B": np.zeros((1, 2))} for _ in range(3)])


def test_zero_coupling_stationary(ring3):
    inst = _uncoupled()
    res = run(inst, ring3, 0.5, 20)
    assert np.all(res.state.lam == 0)
    assert np.all(res.state.y == 0)
    np.testing.assert_allclose(res.x_final.reshape(3, 2), [[-0.5, 0.5]] * 3, atol=1e-9)


def test_horizon_one_recovers_y2(tiny_instance, ring3):
    res = run(tiny_instance, ring3, 0.2, 1)
    x2, _, _ = solve_agents(tiny_instance, res.state.y, 1e-10)
    np.testing.assert_allclose(res.x_final.reshape(3, 2), x2, atol=1e-8)
    np.testing.assert_array_equal(res.state.yhat, res.state.y)
    assert len(res.trace) == 1


# full runs --------------------------------------------------------------------

def test_invariants_each_round(tiny_instance, ring3):
    seen = []

    def cb(k, state, rec):
        lam_sum = np.linalg.norm(state.lam.sum(axis=0))
        assert lam_sum <= 1e-9 * (1 + np.abs(state.lam).sum(axis=1).max())
        assert np.all(state.y[:, tiny_instance.d:] >= 0)
        assert np.all(state.yhat[:, tiny_instance.d:] >= 0)
        seen.append(k)

    run(tiny_instance, ring3, 0.01, 200, callback=cb)
    assert seen == list(range(1, 201))


def test_deterministic_and_worker_invariant(tiny_instance, ring3, tiny_reference):
    a = run(tiny_instance, ring3, 0.01, 150, f_star=tiny_reference.f_star, workers=1)
    b = run(tiny_instance, ring3, 0.01, 150, f_star=tiny_reference.f_star, workers=1)
    c = run(tiny_instance, ring3, 0.01, 150, f_star=tiny_reference.f_star, workers=3)
    assert a.trace == b.trace == c.trace
    assert np.array_equal(a.x_final, c.x_final)


def test_converges_on_tiny(tiny_instance, ring3, tiny_reference):
    res = run(tiny_instance, ring3, 0.01, 2000, f_star=tiny_reference.f_star)
    assert np.linalg.norm(res.x_final - tiny_reference.x_star) <= 1e-3
    assert res.trace[-1].rel_primal_error < res.trace[0].rel_primal_error


def test_literal_lambda_variant_differs(tiny_instance, ring3):
    a = run(tiny_instance, ring3, 0.05, 30)
    b = run(tiny_instance, ring3, 0.05, 30, literal_lambda=True)
    assert not np.array_equal(a.state.lam, b.state.lam)
    assert abs(a.state.lam.sum(axis=0)).max() <= 1e-9 and abs(b.state.lam.sum(axis=0)).max() <= 1e-9


def test_network_size_mismatch(tiny_instance, ring20):
    with pytest.raises(ValueError, match="20 nodes"):
        run(tiny_instance, ring20, 0.1, 5)


def test_inner_failure_keeps_partial_trace(tiny_instance, ring3, monkeypatch):
    calls = {"n": 0}

    class Flaky(LocalOracle):
        def solve(self, Y, tol, channel=None):
            calls["n"] += 1
            if calls["n"] > 8:
                self.max_iter = 1
                tol = 1e-15
            return super().solve(Y, tol, channel)

    monkeypatch.setattr(engine_mod, "LocalOracle", Flaky)
    with pytest.raises(EngineError) as exc:
        run(tiny_instance, ring3, 0.1, 50)
    assert exc.value.k is not None and exc.value.k > 1
    assert len(exc.value.trace) == exc.value.k - 1
    assert exc.value.agents


def test_trace_without_reference_is_nan(tiny_instance, ring3):
    res = run(tiny_instance, ring3, 0.1, 3)
    assert all(np.isnan(r.rel_primal_error) for r in res.trace)
    assert all(r.wall_ns == 0 for r in res.trace)
    timed = run(tiny_instance, ring3, 0.1, 3, timing=True, debug=True)
    assert timed.trace[-1].wall_ns > 0
    assert set(timed.trace[-1].extra) == {"inner_iterations", "inner_residual"}


# baseline ---------------------------------------------------------------------

def test_baseline_zero_coupling(ring3):
    res = run_subgradient_baseline(_uncoupled(), ring3, 0.5, 10)
    assert np.all(res.extras["y"] == 0)


def test_baseline_single_agent_is_centralized():
    inst = make_instance([{"A": [[1.0]], "c": [-2.0], "B": [[1.0]], "b": [0.5]}])
    net = Network(1, ())
    res = run_subgradient_baseline(inst, net, 0.3, 25)
    # centralized projected dual subgradient by hand
    y, xs = 0.0, []
    for k in range(1, 26):
        x = 1.0 - y / 2
        xs.append(x)
        y = y - 0.3 / np.sqrt(k) * (-(x - 0.5))
    assert res.extras["y"][0, 0] == pytest.approx(y, abs=1e-9)
    assert res.x_final[0] == pytest.approx(np.mean(xs), abs=1e-9)


def test_baseline_preconditions(tiny_instance, ring3):
    with pytest.raises(ValueError, match="step_c"):
        run_subgradient_baseline(tiny_instance, ring3, 0.0, 5)
    assert default_step_c(tiny_instance) == pytest.approx(1 / tiny_instance.l_g)


def test_complete_graph_runs(tiny_instance):
    res = run(tiny_instance, build_complete(3), 0.05, 50)
    assert len(res.trace) == 50
