"""Cross-diffusion herding model: analytics, time stepping and continuation."""
from .model import (DomainError, InadmissibleDelta, LOGISTIC, ModelParams, Nonlinearity,
                    chi_rate, decay_margin, decay_region, delta0, delta_d, delta_star,
                    epsilon1, steady_state)
from .grid import EntropyReport, EntropyUndefined, Grid, StateField, entropy_report
from .integrator import (ENTROPY, PRIMAL, StepFailure, TimeStepperConfig, Trajectory,
                         entropy_balance, evolve, fit_decay_rate)
from .analytics import (alpha_regime, crossing_check, delta_b, eigenfunction,
                        null_eigenfunction, predict)
from .continuation import (Branch, BranchPoint, BvpSystem, ConvergenceError, Detection,
                           HomotopyError, StepConfig, continue_branch, detect_branch_points,
                           homogeneous_start, homotopy_rho_to_zero, newton_solve, switch_branch)

__version__ = "0.1.0"
