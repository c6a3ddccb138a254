from .config import ExperimentConfig, config_from_dict, dump_config, load_config
from .runner import RunManifest, compare_models, run_experiment

__all__ = [
    "ExperimentConfig",
    "config_from_dict",
    "dump_config",
    "load_config",
    "RunManifest",
    "compare_models",
    "run_experiment",
]
