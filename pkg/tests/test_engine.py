import numpy as np
import pytest
from scipy.sparse import linalg as sparse_linalg

from admmguard import (
    AdmmConfig,
    GeneratorConfig,
    Hooks,
    LinkingConstraint,
    NumericalError,
    QuadraticProblem,
    central_solution,
    generate_instance,
    run_admm,
    u_update,
    x_update,
    z_update,
)
from admmguard.engine import compose_central, recompute_duals
from oracles import ONE_D, problem_kkt


def test_x_update_hand_value(one_d):
    assert x_update(one_d, np.ones(1), np.zeros(1), 1.0) == pytest.approx([ONE_D["x1"]])
    assert np.all(x_update(one_d, np.zeros(1), np.zeros(1), 1.0) == 0)


def test_z_update_hand_value(one_d):
    assert z_update(one_d, np.array([1 / 3]), np.zeros(1), 1.0) == pytest.approx([ONE_D["z1"]])
    assert np.all(z_update(one_d, np.zeros(1), np.zeros(1), 1.0) == 0)


def test_u_update_hand_value(one_d):
    u = u_update(np.zeros(1), np.array([1 / 3]), np.array([1 / 9]), one_d.link)
    assert u == pytest.approx([ONE_D["u1"]])
    # fixed point at r = 0
    assert np.array_equal(u_update(u, np.array([0.5]), np.array([0.5]), one_d.link), u)


def test_updates_are_stationary():
    problem = generate_instance(GeneratorConfig(seed=4), 1)
    A, B, c = problem.link.A, problem.link.B, problem.link.c_link
    rng = np.random.default_rng(0)
    rho = 1.0
    for _ in range(10):
        z, u = rng.normal(size=problem.m), rng.normal(size=problem.p)
        x = x_update(problem, z, u, rho)
        grad_x = 2 * problem.P @ x + problem.c_cost + rho * A.T @ (A @ x + B @ z - c + u)
        assert np.max(np.abs(grad_x)) <= 1e-10 * max(1, np.max(np.abs(x)))
        z2 = z_update(problem, x, u, rho)
        grad_z = 2 * problem.Q @ z2 + problem.d_cost + rho * B.T @ (A @ x + B @ z2 - c + u)
        assert np.max(np.abs(grad_z)) <= 1e-10 * max(1, np.max(np.abs(z2)))


def test_updates_match_iterative_minimisation():
    cfg = GeneratorConfig(seed=21)
    rng = np.random.default_rng(1)
    rho = 1.0
    for i in range(50):
        problem = generate_instance(cfg, i)
        A, B, c = problem.link.A, problem.link.B, problem.link.c_link
        z, u = rng.normal(size=problem.m), rng.normal(size=problem.p)

        # conjugate gradients on the stationarity system, no factorisation
        hess = 2 * problem.P + rho * A.T @ A
        rhs = -problem.c_cost - rho * A.T @ (B @ z - c + u)
        x_num, info = sparse_linalg.cg(hess, rhs, rtol=1e-14, atol=0.0, maxiter=10_000)
        assert info == 0
        x_an = x_update(problem, z, u, rho)
        assert np.max(np.abs(x_num - x_an)) <= 1e-8 * max(1.0, np.max(np.abs(x_an)))


def test_one_d_run_converges_to_origin(one_d):
    trace = run_admm(one_d, AdmmConfig(eps_pri=1e-6, eps_dual=1e-6))
    assert trace.termination == "converged"
    assert abs(trace.final().x[0]) <= 1e-6 and abs(trace.final().z[0]) <= 1e-6
    first = trace.entry(1)
    assert first.x[0] == pytest.approx(ONE_D["x1"])
    assert first.z[0] == pytest.approx(ONE_D["z1"])
    assert first.u[0] == pytest.approx(ONE_D["u1"])


def test_central_one_d(one_d):
    sol = central_solution(one_d)
    assert compose_central(one_d).Pi.tolist() == [[2.0]]
    assert np.all(sol.w == 0) and np.all(sol.x == 0) and np.all(sol.z == 0)


def test_central_zero_linear_cost():
    problem = generate_instance(GeneratorConfig(seed=5), 2)
    zeroed = QuadraticProblem(problem.P, np.zeros(problem.n), problem.Q, np.zeros(problem.m), problem.link)
    assert np.all(central_solution(zeroed).w == 0)


def test_central_matches_kkt_oracle():
    cfg = GeneratorConfig(seed=6)
    for i in range(100):
        problem = generate_instance(cfg, i)
        sol = central_solution(problem)
        x, z = problem_kkt(problem)
        assert np.allclose(sol.x, x, atol=1e-8) and np.allclose(sol.z, z, atol=1e-8)
        assert np.max(np.abs(problem.link.residual(sol.x, sol.z))) == 0.0


def test_central_block_layout():
    problem = generate_instance(GeneratorConfig(seed=8), 3)
    n, p = problem.n, problem.p
    Pi = compose_central(problem).Pi
    P, Q = problem.P, problem.Q
    assert np.allclose(Pi[:n - p, :n - p], P[:n - p, :n - p])
    assert np.allclose(Pi[n - p:n, n - p:n], P[n - p:, n - p:] + Q[:p, :p])
    assert np.allclose(Pi[n:, n:], Q[p:, p:])
    assert np.allclose(Pi[:n - p, n:], 0)


def test_objective_and_dual_replay_on_honest_runs():
    cfg = GeneratorConfig(seed=7)
    for i in range(30):
        problem = generate_instance(cfg, i)
        trace = run_admm(problem)
        assert trace.converged
        sol = central_solution(problem)
        f_admm = problem.objective(trace.final().x, trace.final().z)
        f_star = problem.objective(sol.x, sol.z)
        assert abs(f_admm - f_star) <= 1e-4 * max(1.0, abs(f_star))
        U = recompute_duals(trace, problem.link)
        assert np.array_equal(U, np.array([e.u for e in trace.entries]))


def test_terminates_exactly_when_thresholds_pass():
    cfg = AdmmConfig()
    problem = generate_instance(GeneratorConfig(seed=12), 0)
    trace = run_admm(problem, cfg)
    r, s = trace.r_norms, trace.s_norms
    ok = (r <= cfg.eps_pri) & (s <= cfg.eps_dual)
    assert ok[-1] and not ok[:-1].any()


def test_hooks_attack_and_mitigator_annotate():
    problem = generate_instance(GeneratorConfig(seed=1), 1)
    hooks = Hooks(attack=lambda x, state, k: x + 1.0, mitigator=lambda x, state, k: (x - 1.0, True))
    trace = run_admm(problem, AdmmConfig(max_iterations=5), hooks)
    e = trace.entry(1)
    assert e.attacked and e.mitigated
    assert np.allclose(e.x_sent, e.x_honest + 1.0) and np.allclose(e.x, e.x_honest)


def test_detector_abort():
    problem = generate_instance(GeneratorConfig(seed=1), 1)
    trace = run_admm(problem, AdmmConfig(), Hooks(detector=lambda t: t.k == 3))
    assert trace.termination == "detector-abort" and trace.k == 3


def test_iteration_cap():
    problem = generate_instance(GeneratorConfig(seed=1), 1)
    trace = run_admm(problem, AdmmConfig(max_iterations=2))
    assert trace.termination == "iteration-cap" and trace.k == 2


def test_singular_subproblem_raises():
    link = LinkingConstraint(np.array([[1.0, 0.0]]), np.array([[-1.0]]), np.zeros(1))
    problem = QuadraticProblem(np.zeros((2, 2)), np.zeros(2), np.eye(1), np.zeros(1), link)
    with pytest.raises(NumericalError) as err:
        run_admm(problem)
    assert err.value.partial_trace is not None


def test_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(rho=0)
    with pytest.raises(ValueError):
        AdmmConfig(eps_pri=0)
    with pytest.raises(ValueError):
        AdmmConfig(max_iterations=0)
