"""EEG movement decoding: signal cleanup, from-scratch CNNs, evaluation.

The package turns continuous EEG + robot kinematics into two binary
decoding tasks (movement intent, fast/slow reaction time), trains small
convolutional networks on a numpy-only autodiff core, and scores them
under leave-one-subject-out, subject-specific, and pooled schemes. A
seeded synthetic cohort generator provides ground truth for end-to-end
validation. See the `eegmotion` console script for the pipeline CLI.
"""

__version__ = "0.1.0"

from .data import (
    LabeledDataset,
    PreprocessConfig,
    RawRecording,
    Trial,
    build_intent_dataset,
    build_rt_dataset,
    compute_rt,
    discretize_rt,
    label_intent,
    load_dataset,
    load_recording,
    merge_datasets,
    preprocess_recording,
    remove_rt_outliers,
    save_dataset,
    save_recording,
)
from .evaluate import EvalReport, confusion_and_f1, run_scheme, split_loo, split_ratio
from .network import (
    Network,
    TrainConfig,
    build_network,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .synth import CohortConfig, generate_cohort, generate_subject
from .tensor import Tensor, gradient_check

__all__ = [
    "__version__",
    "LabeledDataset",
    "PreprocessConfig",
    "RawRecording",
    "Trial",
    "build_intent_dataset",
    "build_rt_dataset",
    "compute_rt",
    "discretize_rt",
    "label_intent",
    "load_dataset",
    "load_recording",
    "merge_datasets",
    "preprocess_recording",
    "remove_rt_outliers",
    "save_dataset",
    "save_recording",
    "EvalReport",
    "confusion_and_f1",
    "run_scheme",
    "split_loo",
    "split_ratio",
    "Network",
    "TrainConfig",
    "build_network",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
    "CohortConfig",
    "generate_cohort",
    "generate_subject",
    "Tensor",
    "gradient_check",
]
