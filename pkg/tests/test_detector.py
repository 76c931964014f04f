from dataclasses import replace

import numpy as np
import pytest

from admmguard import (
    AdmmConfig,
    AttackSpec,
    CollinearityError,
    ConditioningError,
    DetectorConfig,
    GeneratorConfig,
    Hooks,
    InsufficientIterates,
    NoiseAttack,
    OnlineDetector,
    assemble_system,
    detect,
    generate_instance,
    recover_gradient,
    run_admm,
    select_points,
    solve_hessian,
)
from admmguard.detector import GradientSample, audit_windows, detect_series, gradient_series, linked_hessian
from oracles import ONE_D, linked_hessian_by_elimination


def test_recover_gradient_one_d(one_d):
    trace = run_admm(one_d, AdmmConfig(max_iterations=3))
    g = recover_gradient(trace, 1, one_d.link)
    assert g.gradient == pytest.approx([ONE_D["g1"]])
    assert g.gradient[0] == pytest.approx(2 * trace.x(1)[0])


def test_recover_gradient_matches_analytic_gradient():
    for i in range(10):
        problem = generate_instance(GeneratorConfig(seed=31), i)
        trace = run_admm(problem)
        for k in range(1, trace.k + 1):
            g = recover_gradient(trace, k, problem.link, "full").gradient
            assert np.max(np.abs(g - problem.grad_f(trace.x(k)))) <= 1e-8


def test_recover_gradient_static_z_reduces_to_dual():
    problem = generate_instance(GeneratorConfig(seed=3), 0)
    trace = run_admm(problem, AdmmConfig(max_iterations=6))
    # pretend every x-update saw the z it was paired with
    still = replace(trace, entries=tuple(replace(e, z_seen=e.z) for e in trace.entries))
    for k in range(1, still.k + 1):
        g = recover_gradient(still, k, problem.link, "full").gradient
        assert np.array_equal(g, problem.link.A.T @ (-still.rho * still.u(k)))


def test_recover_gradient_out_of_range():
    problem = generate_instance(GeneratorConfig(seed=3), 0)
    trace = run_admm(problem, AdmmConfig(max_iterations=4))
    with pytest.raises(Exception):
        recover_gradient(trace, 5, problem.link)


def test_select_points_examples():
    assert select_points(10, 3) == [2, 6, 10]
    n = 4
    with pytest.raises(InsufficientIterates):
        select_points(n + 1, n + 1)
    assert select_points(10, 3, "most_recent") == [8, 9, 10]
    assert select_points(10, 3, "custom", [3, 4, 9]) == [3, 4, 9]


def test_windows_end_at_reference():
    for k in range(4, 60):
        for count in (2, 3, 5):
            if k < count + 1:
                continue
            for w in audit_windows(k, count):
                assert w[-1] == k and len(w) == count and len(set(w)) == count


def test_assemble_system_unit_offsets():
    ref = GradientSample(3, np.zeros(2), np.zeros(2))
    a = GradientSample(1, np.array([1.0, 0.0]), np.zeros(2))
    b = GradientSample(2, np.array([0.0, 1.0]), np.zeros(2))
    D, G = assemble_system([a, b], ref)
    assert D.tolist() == [[-1, 0, 0, 0], [0, 0, -1, 0], [0, -1, 0, 0], [0, 0, 0, -1]]


def test_assemble_system_collinear():
    ref = GradientSample(3, np.array([2.0, 2.0]), np.zeros(2))
    pts = [GradientSample(1, np.zeros(2), np.zeros(2)), GradientSample(2, np.ones(2), np.zeros(2))]
    with pytest.raises(CollinearityError) as err:
        assemble_system(pts, ref)
    assert err.value.pair == (1, 2)


def test_quadratic_identity_exact():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(3, 3))
    H = 2 * L.T @ L
    c = rng.normal(size=3)
    pts = rng.normal(size=(4, 3))
    samples = [GradientSample(i, x, H @ x + c) for i, x in enumerate(pts)]
    D, G = assemble_system(samples[:3], samples[3])
    assert np.max(np.abs(D @ H.reshape(-1) - G)) <= 1e-8
    est = solve_hessian(D, G)
    assert np.allclose(est.H, H, atol=1e-6)


def test_solve_hessian_identity_and_indefinite():
    est = solve_hessian(np.eye(4), np.eye(2).reshape(-1))
    assert np.array_equal(est.H, np.eye(2)) and est.lambda_min == 1.0 and not est.flagged
    est = solve_hessian(np.eye(4), np.diag([1.0, -1.0]).reshape(-1))
    assert est.lambda_min == -1.0 and est.flagged


def test_solve_hessian_condition_gate():
    D = np.diag([1.0, 1.0, 1.0, 1e-12])
    with pytest.raises(ConditioningError):
        solve_hessian(D, np.ones(4), kappa_max=1e8)


def test_linked_hessian_matches_elimination_oracle():
    for i in range(30):
        problem = generate_instance(GeneratorConfig(seed=41), i)
        assert np.allclose(linked_hessian(problem.P, problem.link),
                           linked_hessian_by_elimination(problem.P, problem.link.A), rtol=1e-7, atol=1e-9)


def test_honest_hessian_recovered():
    cfg = DetectorConfig(keep_audits=True, stop_at_first=False)
    for i in range(20):
        problem = generate_instance(GeneratorConfig(seed=17), i)
        trace = run_admm(problem)
        report = detect(trace, problem.link, cfg)
        assert report.verdict == "no_attack_detected"
        target = linked_hessian(problem.P, problem.link)
        for est in report.audits:
            assert np.linalg.norm(est.H - target) <= 1e-4 * np.linalg.norm(target)


def test_noise_attack_detected():
    hits = 0
    for i in range(40):
        problem = generate_instance(GeneratorConfig(seed=19), i)
        trace = run_admm(problem, AdmmConfig(), Hooks(attack=NoiseAttack(AttackSpec(seed=i))))
        hits += detect(trace, problem.link).detected
    assert hits >= 36


def test_short_trace_inconclusive():
    problem = generate_instance(GeneratorConfig(seed=2), 5)
    trace = run_admm(problem, AdmmConfig(max_iterations=problem.p + 1))
    report = detect(trace, problem.link)
    assert report.verdict == "inconclusive" and report.audits_accepted == 0


def test_verdict_iff_flagged_audit():
    rng = np.random.default_rng(3)
    cfg = DetectorConfig(keep_audits=True, stop_at_first=False)
    for _ in range(50):
        Y = rng.normal(size=(12, 2))
        G = rng.normal(size=(12, 2))
        Y[0] = G[0] = np.nan
        rep = detect_series(Y, G, cfg)
        assert rep.detected == any(a.flagged for a in rep.audits)
        if rep.detected:
            first = min(a.k for a in rep.audits if a.flagged)
            assert rep.first_detection_iterate == first


def test_online_matches_offline():
    problem = generate_instance(GeneratorConfig(seed=19), 1)
    spec = AttackSpec(seed=1)
    online = OnlineDetector(problem.link)
    trace = run_admm(problem, AdmmConfig(), Hooks(attack=NoiseAttack(spec), detector=online))
    full = run_admm(problem, AdmmConfig(), Hooks(attack=NoiseAttack(spec)))
    offline = detect(full, problem.link)
    assert online.report.verdict == offline.verdict
    assert online.report.first_detection_iterate == offline.first_detection_iterate
    if offline.detected:
        assert trace.termination == "detector-abort" and trace.k == offline.first_detection_iterate


def test_gradient_series_agrees_with_recover():
    problem = generate_instance(GeneratorConfig(seed=5), 4)
    trace = run_admm(problem)
    Y, G = gradient_series(trace, problem.link, "linked_only")
    for k in (1, 2, trace.k):
        s = recover_gradient(trace, k, problem.link, "linked_only")
        assert np.allclose(Y[k], s.point) and np.allclose(G[k], s.gradient)


def test_linked_only_caveat():
    problem = generate_instance(GeneratorConfig(seed=5), 4)
    report = detect(run_admm(problem), problem.link)
    assert (report.caveat is not None) == (problem.p < problem.n)


def test_report_record_fields():
    problem = generate_instance(GeneratorConfig(seed=5), 4)
    rec = detect(run_admm(problem), problem.link).to_record()
    assert list(rec) == ["verdict", "first_detection_iterate", "audits_total", "audits_rejected_conditioning",
                         "audits_rejected_collinearity", "min_lambda_seen"]


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(psd_tol=-1)
    with pytest.raises(ValueError):
        DetectorConfig(kappa_max=1)
    with pytest.raises(ValueError):
        DetectorConfig(strategy="custom")
