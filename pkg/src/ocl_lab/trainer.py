"""Loss assembly for the three training methods and the task-stream loop.

Methods: plain finetune (cross-entropy on current samples over all seen
classes), experience replay (one cross-entropy over the union of current
and buffered samples), and feature-subspace replay (current samples scored
in the task's subspace, buffered samples in the accumulated space, the two
terms blended by a replay weight). The loop is strictly sequential: one
pass over each task's stream with a buffer update after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .buffer import ReplayBuffer
from .data import BatchStream, Task, TaskSequence, stream_batches
from .errors import ConfigError, EmptyBatchError, StateError
from .evaluation import AccuracyMatrix, evaluate
from .nn_core import (
    GradientBundle,
    ModelBundle,
    backward,
    forward_pass,
    init_model,
    masked_cross_entropy,
    sgd_step,
)
from .subspace import AccumulatedMask, SubspaceMask, accumulate, blank_subspace, mask_bits, reuse_subspace

Array = np.ndarray

METHODS = ("finetune", "er", "erfsl")
ABLATIONS = ("none", "fixed_s", "inverted_spaces", "unweighted")


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    method: str = "erfsl"
    ablation: str = "none"
    replay_weight: float = 0.5
    learning_rate: float = 0.1
    current_batch: int = 10
    replay_batch: int = 10
    buffer_capacity: int = 500
    subspace_size: int | None = None
    hidden_dims: tuple[int, ...] = (128,)
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.ablation != "none" and self.method != "erfsl":
            raise ConfigError(f"ablation {self.ablation!r} applies to erfsl only")
        if not 0.0 <= self.replay_weight <= 1.0:
            raise ConfigError(f"replay weight must lie in [0, 1], got {self.replay_weight}")
        if self.learning_rate < 0.0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.current_batch < 1 or self.replay_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.buffer_capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {self.buffer_capacity}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature dim must be >= 1, got {self.feature_dim}")
        if self.subspace_size is not None and not 1 <= self.subspace_size <= self.feature_dim:
            raise ConfigError(
                f"subspace size {self.subspace_size} outside [1, {self.feature_dim}]"
            )
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


@dataclass
class LossResult:
    """Total loss with its gradients plus the two term values for logging."""

    loss: float
    grads: GradientBundle
    loss_current: float
    loss_replay: float


@dataclass
class StepRecord:
    """One training step for the structured experiment log."""

    step: int
    task_id: int
    loss_current: float
    loss_replay: float
    loss_total: float
    buffer_fill: int
    mask_id: int


@dataclass
class TrainerState:
    """Mutable loop state threaded through the tasks of one run."""

    model: ModelBundle
    buffer: ReplayBuffer
    masks: list[SubspaceMask] = field(default_factory=list)
    accumulated: AccumulatedMask | None = None
    seen_classes: list[int] = field(default_factory=list)
    task_counter: int = 0
    step_counter: int = 0
    records: list[StepRecord] = field(default_factory=list)


def _full_mask(dim: int) -> Array:
    return np.ones(dim, dtype=bool)


def _ce_with_grads(model: ModelBundle, x, y, bits, class_set):
    fp = forward_pass(x, model.extractor)
    ce = masked_cross_entropy(fp.features, y, model.classifier, bits, class_set)
    fp.loss = ce
    return ce, backward(model, fp)


def loss_finetune(model: ModelBundle, batch, seen_classes) -> LossResult:
    """Full-space cross-entropy over all seen classes, current samples only."""
    x, y = batch
    class_set = sorted(int(c) for c in seen_classes)
    ce, grads = _ce_with_grads(model, x, y, _full_mask(model.feature_dim), class_set)
    return LossResult(ce.loss, grads, ce.loss, 0.0)


def loss_er(model: ModelBundle, current_batch, replay_batch, seen_classes) -> LossResult:
    """Full-space cross-entropy averaged over current and buffered samples."""
    x_cur, y_cur = current_batch
    x_rep, y_rep = replay_batch
    x_cur = np.asarray(x_cur, dtype=np.float64)
    if x_cur.shape[0] == 0:
        raise EmptyBatchError("the current batch must be non-empty")
    if np.asarray(x_rep).shape[0] == 0:
        return loss_finetune(model, current_batch, seen_classes)
    x = np.vstack([x_cur, np.asarray(x_rep, dtype=np.float64)])
    y = np.concatenate([np.asarray(y_cur, dtype=np.int64).ravel(),
                        np.asarray(y_rep, dtype=np.int64).ravel()])
    class_set = sorted(int(c) for c in seen_classes)
    ce, grads = _ce_with_grads(model, x, y, _full_mask(model.feature_dim), class_set)
    n_cur = x_cur.shape[0]
    return LossResult(
        ce.loss,
        grads,
        float(ce.per_sample[:n_cur].mean()),
        float(ce.per_sample[n_cur:].mean()),
    )


def loss_er_fsl(
    model: ModelBundle,
    current_batch,
    replay_batch,
    learn_mask,
    replay_mask,
    replay_weight: float,
    seen_classes,
    *,
    unweighted: bool = False,
    require_nested: bool = True,
) -> LossResult:
    """Blend of a subspace-masked current-sample term and an accumulated-space
    replay term: (1 - w) * L_current + w * L_replay.

    An empty replay batch contributes zero loss and zero gradient while the
    (1 - w) scaling of the current term still applies. With ``unweighted``
    both terms get weight 1. ``require_nested`` enforces that the learning
    mask is contained in the replay mask (disabled for the inverted-space
    ablation, which swaps the two).
    """
    if not 0.0 <= replay_weight <= 1.0:
        raise ConfigError(f"replay weight must lie in [0, 1], got {replay_weight}")
    dim = model.feature_dim
    learn_bits = mask_bits(learn_mask, dim)
    replay_bits = mask_bits(replay_mask, dim)
    if require_nested and np.any(learn_bits & ~replay_bits):
        raise ConfigError("the learning mask must be contained in the replay mask")

    x_cur, y_cur = current_batch
    if np.asarray(x_cur).shape[0] == 0:
        raise EmptyBatchError("the current batch must be non-empty")
    class_set = sorted(int(c) for c in seen_classes)
    weight_current, weight_replay = (1.0, 1.0) if unweighted else (1.0 - replay_weight, replay_weight)

    ce_cur, grads_cur = _ce_with_grads(model, x_cur, y_cur, learn_bits, class_set)
    x_rep, y_rep = replay_batch
    if np.asarray(x_rep).shape[0] == 0:
        total = weight_current * ce_cur.loss
        return LossResult(total, grads_cur.scaled(weight_current), ce_cur.loss, 0.0)
    ce_rep, grads_rep = _ce_with_grads(model, x_rep, y_rep, replay_bits, class_set)
    total = weight_current * ce_cur.loss + weight_replay * ce_rep.loss
    grads = grads_cur.scaled(weight_current) + grads_rep.scaled(weight_replay)
    return LossResult(total, grads, ce_cur.loss, ce_rep.loss)


def _assign_subspace(state: TrainerState, config: TrainConfig, task: Task, subspace_size: int) -> SubspaceMask:
    dim = state.model.feature_dim
    t = task.task_id
    if config.ablation == "fixed_s":
        mask = SubspaceMask(blank_subspace(1, subspace_size, dim).bits, task_id=t)
    elif t * subspace_size <= dim:
        mask = blank_subspace(t, subspace_size, dim)
    else:
        mask = reuse_subspace(
            state.model.classifier.weights, subspace_size, state.seen_classes, task_id=t
        )
    state.masks.append(mask)
    previous = state.accumulated or AccumulatedMask.empty(dim)
    state.accumulated = accumulate(previous, mask)
    return mask


def train_task(
    state: TrainerState,
    task_stream: BatchStream,
    config: TrainConfig,
    on_step=None,
) -> TrainerState:
    """One single-pass task: per batch retrieve, compute loss, step, store.

    Before the first batch the task's subspace is assigned (blank slice if
    one remains, otherwise variance-based reuse on the pre-task classifier)
    and the seen-class set is extended with the task's classes. ``on_step``,
    when given, is called after every update with (record, loss_result).
    """
    task = task_stream.task
    if state.task_counter != task.task_id - 1:
        raise StateError(
            f"task counter {state.task_counter} cannot accept task {task.task_id}"
        )
    dim = state.model.feature_dim

    mask: SubspaceMask | None = None
    if config.method == "erfsl":
        if config.subspace_size is None:
            raise ConfigError("erfsl needs a subspace size (default is feature_dim // task_count)")
        mask = _assign_subspace(state, config, task, config.subspace_size)
    elif state.accumulated is None:
        state.accumulated = AccumulatedMask.full(dim)
    state.seen_classes.extend(int(c) for c in task.classes)

    for x_batch, y_batch in task_stream:
        if config.method == "finetune":
            result = loss_finetune(state.model, (x_batch, y_batch), state.seen_classes)
        elif config.method == "er":
            replay = state.buffer.retrieve(config.replay_batch)
            result = loss_er(state.model, (x_batch, y_batch), replay, state.seen_classes)
        else:
            replay = state.buffer.retrieve(config.replay_batch)
            learn_mask, replay_mask = mask, state.accumulated
            if config.ablation == "inverted_spaces":
                learn_mask, replay_mask = replay_mask, learn_mask
            result = loss_er_fsl(
                state.model,
                (x_batch, y_batch),
                replay,
                learn_mask,
                replay_mask,
                config.replay_weight,
                state.seen_classes,
                unweighted=config.ablation == "unweighted",
                require_nested=config.ablation != "inverted_spaces",
            )
        state.model = sgd_step(state.model, result.grads, config.learning_rate)
        state.buffer.update(x_batch, y_batch)
        state.step_counter += 1
        record = StepRecord(
            step=state.step_counter,
            task_id=task.task_id,
            loss_current=result.loss_current,
            loss_replay=result.loss_replay,
            loss_total=result.loss,
            buffer_fill=state.buffer.size,
            mask_id=mask.task_id if mask is not None else 0,
        )
        state.records.append(record)
        if on_step is not None:
            on_step(record, result)
    state.task_counter = task.task_id
    return state


@dataclass
class ExperimentResult:
    """Everything one run produces: the accuracy matrix plus final state."""

    config: TrainConfig
    matrix: AccuracyMatrix
    state: TrainerState
    per_task_average: list[float]

    @property
    def final_accuracy(self) -> float:
        return self.per_task_average[-1]


def run_experiment(
    config: TrainConfig, task_sequence: TaskSequence, test_sets
) -> ExperimentResult:
    """Algorithm loop over a task sequence with per-task evaluation.

    After each task i, every test set j <= i is evaluated with the current
    accumulated mask over all seen classes, filling row i of the accuracy
    matrix.
    """
    tasks = task_sequence.tasks
    test_sets = list(test_sets)
    if len(test_sets) != len(tasks):
        raise ConfigError(f"{len(test_sets)} test sets for {len(tasks)} tasks")
    for task, test_set in zip(tasks, test_sets):
        extra = set(int(v) for v in np.unique(np.asarray(test_set.labels))) - set(task.classes)
        if extra:
            raise ConfigError(
                f"test set for task {task.task_id} contains foreign classes {sorted(extra)}"
            )

    root = np.random.SeedSequence(config.seed)
    init_seq, buffer_seq, stream_seq = root.spawn(3)
    effective = config
    if config.subspace_size is None:
        effective = TrainConfig(
            **{**config.__dict__, "subspace_size": max(1, config.feature_dim // len(tasks))}
        )

    model = init_model(
        task_sequence.input_dim,
        config.hidden_dims,
        config.feature_dim,
        task_sequence.class_count,
        np.random.default_rng(init_seq),
    )
    state = TrainerState(
        model=model,
        buffer=ReplayBuffer(config.buffer_capacity, np.random.default_rng(buffer_seq)),
    )
    stream_seeds = stream_seq.generate_state(len(tasks))

    matrix = AccuracyMatrix(len(tasks))
    per_task_average = []
    for task, stream_seed in zip(tasks, stream_seeds):
        stream = stream_batches(task, config.current_batch, int(stream_seed))
        train_task(state, stream, effective)
        row = []
        for j in range(1, task.task_id + 1):
            accuracy = evaluate(state.model, state.accumulated, test_sets[j - 1], state.seen_classes)
            matrix.record(task.task_id, j, accuracy)
            row.append(accuracy)
        per_task_average.append(float(np.mean(row)))
    return ExperimentResult(config=config, matrix=matrix, state=state, per_task_average=per_task_average)
