from dare_lab.harness.config import ExperimentConfig, config_from_dict, load_config
from dare_lab.harness.loop import RunError, RunReport, run_bound_check, run_estimator_bench, run_train

__all__ = [
    "ExperimentConfig",
    "RunError",
    "RunReport",
    "config_from_dict",
    "load_config",
    "run_bound_check",
    "run_estimator_bench",
    "run_train",
]
