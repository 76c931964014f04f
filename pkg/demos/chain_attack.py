"""Three nodes w - x - z, with the middle node misbehaving.

Shows which attacks a neighbour can detect, which it can pin on x, and
which it can undo.

    python demos/chain_attack.py
"""

import numpy as np

from admmguard import (
    AdmmConfig,
    AttackSpec,
    bounds_from_run,
    linking_check,
    node_audit,
    random_chain,
    run_decentralized,
)

W, X, Z = 0, 1, 2
cfg = AdmmConfig()
chain = random_chain(np.random.default_rng(11), (3, 4, 3), (1, 1), names=("w", "x", "z"))
honest = run_decentralized(chain, cfg)
print(f"honest chain: converged={honest.converged} in {honest.k} rounds")
chain = bounds_from_run(honest)

run = run_decentralized(chain.with_node(X, attack=AttackSpec(seed=1)), cfg)
print("noise at x:")
for r in (W, Z):
    print(f"  {chain.nodes[r].name} audits x -> {node_audit(run, r, X).verdict}")

run = run_decentralized(chain.with_node(X, attack=AttackSpec("linking_infeasibility")), cfg)
print("linking infeasibility at x:")
for r in (W, Z):
    check = linking_check(run, r, X)
    print(f"  {chain.nodes[r].name}: detected={check.detected}, blamed {check.localized_to}")
mitigated = run_decentralized(chain.with_node(X, attack=AttackSpec("linking_infeasibility")), cfg, mitigate=True)
print(f"  with projection: converged={mitigated.converged} (the attacker keeps pushing)")

node = chain.nodes[X]
tight = np.where(np.arange(node.n) == 1, 0.5 * (node.public_lower + node.public_upper), node.public_upper)
stealthy = chain.with_node(X, private_upper=tight, attack=AttackSpec("private_infeasibility", mode="inside_pub"))
run = run_decentralized(stealthy, cfg)
flagged = any(node_audit(run, r, X).detected or linking_check(run, r, X).detected for r in (W, Z))
print(f"private infeasibility inside the public box: flagged by a neighbour = {flagged}")
