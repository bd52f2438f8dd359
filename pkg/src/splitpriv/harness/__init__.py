"""Config-driven experiment pipeline and its command line face."""
from .config import ExperimentConfig, from_mapping, load_config
from .pipeline import Experiment, RunRecord, run_pipeline, stage_seed
from .report import emit_report

__all__ = ["ExperimentConfig", "Experiment", "RunRecord", "emit_report", "from_mapping", "load_config",
           "run_pipeline", "stage_seed"]
