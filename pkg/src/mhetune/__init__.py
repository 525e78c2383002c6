"""Parametric system identification by tuning a horizon estimator.

Windows of measured data are explained by per-window state estimation
with a constant arrival cost; the mean squared one-step prediction error
is then minimized over the model parameters theta and the arrival
parameters eta jointly.
"""

from .arrival import (ArrivalParams, default_arrival, eta_to_weight,
                      l_free_from_factor, n_eta, pack_eta, unpack_eta)
from .data import (Trajectory, Window, WindowBatch, extract_windows,
                   load_dataset, load_manifest, load_trajectory_csv,
                   save_manifest, save_trajectory_csv)
from .errors import (ConfigError, EvaluationError, ModelContractError,
                     NumericFailure, WeightFactorizationError)
from .mhe import (MheOptions, MheSolution, block_tridiag_solve, mhe_cost,
                  mhe_solve, mhe_solve_batch, mhe_stationarity, predict,
                  predict_batch)
from .models import (ParametricModel, builtin_model, check_jacobians,
                     eval_dynamics, eval_output, register_model)
from .pem import (IdentificationResult, IdentifyOptions, McCurve,
                  evaluate_objective, identify, mc_expected_objective,
                  save_result_json, save_trace_csv)
from .sensitivity import (WindowJacobian, prediction_jacobian,
                          solution_sensitivity)
from .sim import SimConfig, rk4_step, sample, simulate

__version__ = "0.1.0"

__all__ = [
    "ArrivalParams", "ConfigError", "EvaluationError", "IdentificationResult",
    "IdentifyOptions", "McCurve", "MheOptions", "MheSolution",
    "ModelContractError", "NumericFailure", "ParametricModel", "SimConfig",
    "Trajectory", "WeightFactorizationError", "Window", "WindowBatch",
    "WindowJacobian", "block_tridiag_solve", "builtin_model",
    "check_jacobians", "default_arrival", "eta_to_weight", "eval_dynamics",
    "eval_output", "evaluate_objective", "extract_windows", "identify",
    "l_free_from_factor", "load_dataset", "load_manifest",
    "load_trajectory_csv", "mc_expected_objective", "mhe_cost", "mhe_solve",
    "mhe_solve_batch", "mhe_stationarity", "n_eta", "pack_eta", "predict",
    "predict_batch", "prediction_jacobian", "register_model", "rk4_step",
    "sample", "save_manifest", "save_result_json", "save_trace_csv",
    "save_trajectory_csv", "simulate", "solution_sensitivity", "unpack_eta",
]
