"""Joint identification of demand response agent models and baseline demand.

A baseline-demand forecaster (a small MLP) and a differentiable quadratic
program representing the agent's incentive response are trained end to end
against net-demand measurements: forward solves produce the response and its
duals, implicit differentiation of the optimality system produces the
parameter gradients, and both modules are updated jointly.
"""

from .agent_qp import (
    AgentModelKind,
    AgentParams,
    PriceSignal,
    QPSolution,
    agent_objective,
    kkt_residuals,
    solve_agent_qp,
    solve_asymmetric,
)
from .kkt_backward import (
    JacobianSet,
    KKTMatrix,
    build_kkt_system,
    finite_diff_jacobian,
    solve_jacobians,
    vjp_agent,
)

__version__ = "0.1.0"
