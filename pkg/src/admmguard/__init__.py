"""ADMM for two-block quadratic programs under attack.

Solve with an aggregator or on a chain of nodes, inject attacks on the
x-update, audit the implied Hessian of a neighbour for convexity, and
project infeasible updates back onto the public feasible set.
"""

from .attacks import (
    AttackInapplicable,
    AttackSpec,
    LinkingAttack,
    NoiseAttack,
    PrivateInfeasibilityAttack,
    displace_outside,
    linking_infeasibility_attack,
    noise_attack,
    objective_distortion_attack,
    private_infeasibility_attack,
)
from .decentralized import (
    DECENTRALIZED_CAPABILITIES,
    ChainProblem,
    ChainRun,
    EdgeSpec,
    NodeSpec,
    bounds_from_run,
    linking_check,
    node_audit,
    random_chain,
    run_decentralized,
)
from .detector import (
    CollinearityError,
    ConditioningError,
    DetectionReport,
    DetectorConfig,
    HessianEstimate,
    InsufficientIterates,
    OnlineDetector,
    assemble_system,
    detect,
    recover_gradient,
    select_points,
    solve_hessian,
)
from .engine import (
    AdmmConfig,
    Hooks,
    NumericalError,
    central_solution,
    run_admm,
    x_update,
    z_update,
    u_update,
)
from .generator import GenerationError, GeneratorConfig, generate_instance, generate_problem
from .harness import BatchConfig, BatchResults, ConfigError, emit_report, run_batch
from .mitigator import MitigationImpossible, ProjectionMitigator, check_public_bounds, project_best_response
from .problem import (
    AdmmState,
    AdmmTrace,
    LinkingConstraint,
    PublicBounds,
    QuadraticProblem,
    StructureError,
    load_problem,
    read_trace,
    save_problem,
    write_trace,
)

__version__ = "0.1.0"
