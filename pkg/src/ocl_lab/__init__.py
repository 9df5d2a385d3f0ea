"""Desk-scale online continual-learning lab.

Single-pass task streams, a reservoir replay buffer, feature-subspace
training with an accumulated replay space, and the accuracy/forgetting
metrics and diagnostics to compare finetune, replay, and subspace-replay
training on small dense models.
"""

from .buffer import ReplayBuffer
from .data import (
    BatchStream,
    LabeledDataset,
    Task,
    TaskSequence,
    load_csv,
    load_idx,
    split_tasks,
    stream_batches,
    synth_gaussian,
    train_test_split,
)
from .errors import (
    ConfigError,
    DimensionError,
    EmptyBatchError,
    FormatError,
    InvalidLabelError,
    NoBlankSubspaceError,
    NumericError,
    OclLabError,
    StateError,
    UndefinedMetricError,
)
from .evaluation import (
    AccuracyMatrix,
    InnerProductProfile,
    average_accuracy,
    decomposed_inner_product,
    evaluate,
    final_forgetting,
    predict,
    predict_batch,
)
from .nn_core import (
    CrossEntropyResult,
    FeatureExtractor,
    ForwardPass,
    GradientBundle,
    LinearClassifier,
    ModelBundle,
    backward,
    forward_features,
    forward_pass,
    init_model,
    masked_cross_entropy,
    sgd_step,
)
from .subspace import (
    AccumulatedMask,
    SubspaceMask,
    accumulate,
    apply_mask,
    blank_subspace,
    mask_bits,
    reuse_subspace,
)
from .trainer import (
    ExperimentResult,
    LossResult,
    StepRecord,
    TrainConfig,
    TrainerState,
    loss_er,
    loss_er_fsl,
    loss_finetune,
    run_experiment,
    train_task,
)

__version__ = "0.1.0"
