"""Distributional dynamic programming with general discounting on a stock-augmented state."""

from .discounting import DiscountFunction, cir_bond_price
from .distributions import (
    QuantileRepresentation,
    ReturnDistribution,
    affine,
    comonotone_sum,
    mixture,
    point_mass,
    project_to_quantiles,
    quantile_levels,
    wasserstein1,
)
from .environments import (
    GbwmConfig,
    Kernel,
    OuOptionConfig,
    TabularMdp,
    build_chain_mdp,
    build_deterministic_chain,
    build_gbwm,
    build_ou_put,
)
from .evaluation import (
    EvalReport,
    exact_evaluate,
    exact_oce,
    monte_carlo_evaluate,
    multi_seed_evaluate,
    preference_reversal_metric,
)
from .finite_horizon import (
    NonStationaryPolicy,
    StockGrid,
    ValueTable,
    backward_induction,
    bellman_apply,
    greedy_step,
    policy_evaluation,
    stock_update,
)
from .infinite_horizon import (
    CompositePolicy,
    ConvergenceError,
    bound_check,
    risk_neutral_tail,
    solve_infinite,
)
from .multi_horizon import (
    HorizonBasis,
    build_hyperbolic_basis,
    multi_backward_induction,
    preference_reversal_sweep,
    select_action,
)
from .rigor import QuantileTable, RigorConfig, q_value, td_update, train, train_multi_horizon
from .risk import OceUtility, oce, oce_suboptimality_bound

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
