"""Noise injection against one aggregator run, caught by the convexity audit.

Solves the same random problem twice, honestly and with the x-update
perturbed by 10% sign noise, then projects a linking attack away.

    python demos/aggregator_attack.py
"""

import numpy as np

from admmguard import (
    AdmmConfig,
    AttackSpec,
    DetectorConfig,
    GeneratorConfig,
    Hooks,
    LinkingAttack,
    NoiseAttack,
    ProjectionMitigator,
    PublicBounds,
    central_solution,
    detect,
    generate_instance,
    run_admm,
)

problem = generate_instance(GeneratorConfig(seed=7), 0)
print(f"problem: n={problem.n}, m={problem.m}, p={problem.p} linked coordinates")

honest = run_admm(problem, AdmmConfig())
print(f"honest run: {honest.termination} after {honest.k} rounds")
report = detect(honest, problem.link, DetectorConfig())
print(f"  audit verdict {report.verdict}, min eigenvalue seen {report.min_lambda_seen:.2e}")

attacked = run_admm(problem, AdmmConfig(), Hooks(attack=NoiseAttack(AttackSpec(seed=3))))
print(f"noisy run: {attacked.termination} after {attacked.k} rounds")
report = detect(attacked, problem.link, DetectorConfig())
print(f"  audit verdict {report.verdict} at round {report.first_detection_iterate}")

# linking attack: the sender pushes z outside its public box; projection undoes it
sol = central_solution(problem)
bounds = PublicBounds.around(sol.x, sol.z, 1.0)
spec = AttackSpec("linking_infeasibility")
for label, mitigator in (("unmitigated", None), ("projected", ProjectionMitigator(problem.link, bounds))):
    hooks = Hooks(attack=LinkingAttack(spec, problem, bounds), mitigator=mitigator)
    trace = run_admm(problem, AdmmConfig(), hooks)
    excess = float(np.max(trace.final().z - bounds.z_upper))
    print(f"linking attack, {label}: {trace.termination}, z beyond its public upper bound by {max(excess, 0.0):.2f}")
