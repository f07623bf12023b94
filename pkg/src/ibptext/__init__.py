"""Certified robustness to word substitutions via interval bound propagation."""
from .evaluation import (AttackConfig, EvalReport, certified_accuracy, exhaustive_attack,
                         genetic_attack, robustness_error_profile)
from .graph import Graph, Parameter, SoundnessError, StateError, TrainingError
from .interval import ConfigurationError, DimensionError, IntervalTensor
from .lexicon import (DataError, Example, FilteringError, NeighborTable, SubstitutionSpec,
                      Vocabulary, build_substitution_spec, generate_memory_task)
from .models import Model, ModelConfig, certify
from .training import TrainConfig, staged_memory_config, train

__all__ = [
    "AttackConfig", "ConfigurationError", "DataError", "DimensionError", "EvalReport",
    "Example", "FilteringError", "Graph", "IntervalTensor", "Model", "ModelConfig",
    "NeighborTable", "Parameter", "SoundnessError", "StateError", "SubstitutionSpec",
    "TrainConfig", "TrainingError", "Vocabulary", "build_substitution_spec", "certified_accuracy",
    "certify", "exhaustive_attack", "generate_memory_task", "genetic_attack",
    "robustness_error_profile", "staged_memory_config", "train",
]
