"""Risk-sensitive constraint inference from multi-task demonstrations.

Two training stages share one constraint representation:

* safe imitation: learn a Beta-distributed feasibility model from expert
  trajectories while training a task-agnostic exploration policy that stays
  inside the inferred constraints,
* safe transfer: freeze the constraint model and optimize a new task's
  reward with the recovered feasibility as the safety signal.
"""

__version__ = "0.1.0"

from .betarisk import (  # noqa: F401
    BetaParams,
    RiskLevel,
    beta_cdf,
    beta_kl,
    cvar_lambda,
    digamma,
    log_beta_fn,
    var_lambda,
)
