import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admmguard import (
    AdmmConfig,
    AttackSpec,
    ChainProblem,
    DetectorConfig,
    GeneratorConfig,
    Hooks,
    NoiseAttack,
    PublicBounds,
    detect,
    generate_instance,
    noise_attack,
    project_best_response,
    run_admm,
    run_decentralized,
    solve_hessian,
    u_update,
)
from admmguard.detector import GradientSample, _solve_structured, assemble_system, audit_windows
from admmguard.generator import build_selectors
from admmguard.problem import AdmmState, dual_residual, is_psd, primal_residual

finite = st.floats(-1e3, 1e3, allow_nan=False)
seeds = st.integers(0, 2**31 - 1)


@st.composite
def selector_case(draw):
    n = draw(st.integers(1, 6))
    m = draw(st.integers(1, 6))
    p = draw(st.integers(1, min(n, m)))
    link = build_selectors(n, m, p)
    x = draw(arrays(float, n, elements=finite))
    z = draw(arrays(float, m, elements=finite))
    u = draw(arrays(float, p, elements=finite))
    return link, x, z, u


@given(selector_case())
def test_u_update_is_u_plus_residual(case):
    link, x, z, u = case
    assert np.array_equal(u_update(u, x, z, link), u + primal_residual(AdmmState(x, z, u), link))


@given(selector_case(), st.floats(0.01, 100))
def test_dual_residual_linear_in_rho(case, rho):
    link, _, z, _ = case
    z_old = np.zeros_like(z)
    assert np.allclose(dual_residual(z, z_old, link, 2 * rho), 2 * dual_residual(z, z_old, link, rho))


@given(seeds, st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_generator_valid_for_any_seed(seed, index):
    p = generate_instance(GeneratorConfig(seed=seed), index)
    assert 1 <= p.n <= 10 and 1 <= p.m <= 10 and 1 <= p.p <= min(p.n, p.m)
    assert is_psd(p.P) and is_psd(p.Q)


@given(arrays(float, st.integers(1, 8), elements=finite), seeds, st.integers(1, 1000))
def test_noise_is_plus_minus_magnitude(x, seed, k):
    out = noise_attack(x, AttackSpec(seed=seed), k)
    assert np.allclose(np.abs(out - x), 0.1 * np.abs(x))
    assert np.array_equal(out, noise_attack(x, AttackSpec(seed=seed), k))


@given(selector_case(), selector_case(), st.floats(0.1, 5))
def test_projection_idempotent_nonexpansive(case, other, half):
    link, x, z, _ = case
    a = x
    b = np.resize(other[1], x.shape)
    bounds = PublicBounds.around(np.zeros_like(x), np.zeros_like(z), half)
    pa, pb = project_best_response(a, link, bounds), project_best_response(b, link, bounds)
    assert np.array_equal(project_best_response(pa, link, bounds), pa)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-12


@given(st.integers(3, 400), st.integers(2, 11), st.sampled_from(["evenly_spaced", "anchored", "most_recent"]))
def test_audit_windows_well_formed(k, count, strategy):
    if k < count + 1:
        return
    for w in audit_windows(k, count, strategy):
        assert len(w) == count and w[-1] == k and len(set(w)) == count
        assert all(1 <= i <= k for i in w)


@st.composite
def quadratic_points(draw):
    l = draw(st.integers(1, 4))
    rng = np.random.default_rng(draw(seeds))
    L = rng.normal(size=(l, l))
    H = L.T @ L + 0.1 * np.eye(l)
    pts = rng.normal(size=(l + 1, l))
    return H, rng.normal(size=l), pts


@given(quadratic_points())
def test_difference_system_exact_for_quadratics(case):
    H, c, pts = case
    samples = [GradientSample(i, x, H @ x + c) for i, x in enumerate(pts)]
    D, G = assemble_system(samples[:-1], samples[-1])
    assert np.allclose(D @ H.reshape(-1), G, atol=1e-9)
    # the structured solve is the same system in block form
    dY = np.array([pts[-1] - x for x in pts[:-1]])
    dG = np.array([samples[-1].gradient - s.gradient for s in samples[:-1]])
    full, fast = solve_hessian(D, G, kappa_max=1e14), _solve_structured(dY, dG, 1e14, 1e-6, 0, ())
    assert np.isclose(full.condition, fast.condition, rtol=1e-6)
    assert np.allclose(full.H, fast.H, atol=1e-8 * max(1, np.abs(H).max()))


@given(st.integers(0, 30), st.integers(5, 200))
@settings(max_examples=25, deadline=None)
def test_detection_is_monotone_in_evidence(index, cut):
    problem = generate_instance(GeneratorConfig(seed=77), index)
    trace = run_admm(problem, AdmmConfig(), Hooks(attack=NoiseAttack(AttackSpec(seed=index))))
    cut = min(cut, trace.k)
    cfg = DetectorConfig()
    if detect(trace.prefix(cut), problem.link, cfg).detected:
        assert detect(trace, problem.link, cfg).detected


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_two_node_equivalence_any_instance(index):
    problem = generate_instance(GeneratorConfig(seed=99), index)
    agg = run_admm(problem)
    run = run_decentralized(ChainProblem.from_problem(problem))
    assert run.k == agg.k
    assert np.max(np.abs(run.sent[-1][0] - agg.final().x)) <= 1e-12
