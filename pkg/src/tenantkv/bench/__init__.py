from .harness import Experiment, ExperimentConfig

__all__ = ["Experiment", "ExperimentConfig"]
