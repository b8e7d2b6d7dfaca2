"""Unsupervised skill segmentation and hierarchical imitation from multi-task demonstrations."""
from .changepoint import KernelPelt, PeltConfig, brute_force_segment, pelt
from .config import PipelineConfig, config_from_dict, dump_config, load_config
from .dataset import (SyntheticKitchenSpec, Trajectory, TrajectoryScaler, generate_synthetic, load_dataset,
                      save_dataset, train_test_split)
from .evqvae import EVQVAE, MacroSegmenter, MacroSegmentation
from .exceptions import (AlignmentError, ConfigurationError, DataError, DependencyError, GenerationError,
                         ProvenanceError, SkillSegError, StageError, TrainingError, UsageError)
from .metrics import MseTable, boundary_f1, export_pca, pca2, termination_accuracy
from .pipeline import Run, read_report, run_pipeline, run_stage
from .policy import SkillPolicy, TerminationClassifier, rollout
from .refine import LloydKMeans, Segmentation, SkillLibrary, TaskProgram, force_align
from .seqvae import SeqVAE, candidate_splits

__version__ = "0.1.0"

__all__ = [
    "KernelPelt", "PeltConfig", "brute_force_segment", "pelt",
    "PipelineConfig", "config_from_dict", "dump_config", "load_config",
    "SyntheticKitchenSpec", "Trajectory", "TrajectoryScaler", "generate_synthetic", "load_dataset",
    "save_dataset", "train_test_split",
    "EVQVAE", "MacroSegmenter", "MacroSegmentation",
    "AlignmentError", "ConfigurationError", "DataError", "DependencyError", "GenerationError",
    "ProvenanceError", "SkillSegError", "StageError", "TrainingError", "UsageError",
    "MseTable", "boundary_f1", "export_pca", "pca2", "termination_accuracy",
    "Run", "read_report", "run_pipeline", "run_stage",
    "SkillPolicy", "TerminationClassifier", "rollout",
    "LloydKMeans", "Segmentation", "SkillLibrary", "TaskProgram", "force_align",
    "SeqVAE", "candidate_splits",
]
