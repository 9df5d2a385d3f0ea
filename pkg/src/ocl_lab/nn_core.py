"""MLP feature extractor with hand-derived backpropagation.

Everything runs on plain float64 numpy arrays. Models are small dataclasses
holding parameter arrays, and all operations are pure functions returning
fresh arrays, so distinct model instances are safe to use from different
threads. The architecture is fixed: a stack of dense layers with a rectifier
after every layer (including the last, so features are non-negative),
followed by a bias-free linear classifier scored by inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyBatchError,
    InvalidLabelError,
    NumericError,
    StateError,
)

Array = np.ndarray


def _as_matrix(value, name: str) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _require_finite(arr: Array, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {name}")


def _mask_bits(mask, feature_dim: int) -> Array:
    """Normalize a mask argument to a boolean vector of length feature_dim."""
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits, dtype=bool).ravel()
    if bits.shape[0] != feature_dim:
        raise DimensionError(
            f"mask length {bits.shape[0]} does not match feature dim {feature_dim}"
        )
    return bits


@dataclass
class FeatureExtractor:
    """Dense rectifier network mapping inputs to non-negative feature rows.

    Layer i applies ``x @ weights[i] + biases[i]`` followed by max(., 0);
    the rectifier is applied after every layer, the last one included.
    """

    weights: list[Array]
    biases: list[Array]

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise DimensionError("extractor needs matching weight/bias lists")
        self.weights = [_as_matrix(w, f"extractor weights[{i}]") for i, w in enumerate(self.weights)]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape[0] != w.shape[1]:
                raise DimensionError(f"bias[{i}] length {b.shape[0]} != fan-out {w.shape[1]}")
            if i + 1 < len(self.weights) and w.shape[1] != self.weights[i + 1].shape[0]:
                raise DimensionError(
                    f"layer {i} fan-out {w.shape[1]} does not feed layer {i + 1} "
                    f"fan-in {self.weights[i + 1].shape[0]}"
                )
            _require_finite(w, f"extractor weights[{i}]")
            _require_finite(b, f"extractor biases[{i}]")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def clone(self) -> "FeatureExtractor":
        return FeatureExtractor([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class LinearClassifier:
    """Bias-free linear head; row c is the prototype vector for class c."""

    weights: Array

    def __post_init__(self):
        self.weights = _as_matrix(self.weights, "classifier weights")
        _require_finite(self.weights, "classifier weights")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def clone(self) -> "LinearClassifier":
        return LinearClassifier(self.weights.copy())


@dataclass
class ModelBundle:
    """The full learnable state: feature extractor plus linear classifier."""

    extractor: FeatureExtractor
    classifier: LinearClassifier

    def __post_init__(self):
        if self.extractor.feature_dim != self.classifier.feature_dim:
            raise DimensionError(
                f"extractor feature dim {self.extractor.feature_dim} != "
                f"classifier feature dim {self.classifier.feature_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    def clone(self) -> "ModelBundle":
        return ModelBundle(self.extractor.clone(), self.classifier.clone())


def init_model(
    input_dim: int,
    hidden_dims: tuple[int, ...],
    feature_dim: int,
    class_count: int,
    seed: int | np.random.Generator = 0,
) -> ModelBundle:
    """Build a randomly initialized model (He-scaled layers, small classifier)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [int(input_dim), *(int(h) for h in hidden_dims), int(feature_dim)]
    if any(d < 1 for d in dims) or class_count < 1:
        raise ConfigError("all layer sizes and the class count must be positive")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    head = 0.01 * rng.standard_normal((class_count, feature_dim))
    return ModelBundle(FeatureExtractor(weights, biases), LinearClassifier(head))


@dataclass
class CrossEntropyResult:
    """Loss value plus the gradient contribution of one cross-entropy term.

    ``feature_grad`` is dL/d(features) for the batch (already averaged over
    it) and ``classifier_grad`` is dL/dW at full classifier shape; both carry
    exact zeros in masked-out feature dimensions.
    """

    loss: float
    probs: Array
    per_sample: Array
    feature_grad: Array
    classifier_grad: Array


@dataclass
class ForwardPass:
    """Retained intermediates of one extractor forward pass.

    ``loss`` is attached by a loss computation before calling backward().
    """

    inputs: Array
    pre_activations: list[Array]
    activations: list[Array]
    loss: CrossEntropyResult | None = None

    @property
    def features(self) -> Array:
        return self.activations[-1]


def forward_pass(x_batch, extractor: FeatureExtractor) -> ForwardPass:
    """Run the extractor and keep every intermediate needed for backprop."""
    x = _as_matrix(x_batch, "x_batch")
    if x.shape[1] != extractor.input_dim:
        raise DimensionError(
            f"input dim {x.shape[1]} does not match extractor input {extractor.input_dim}"
        )
    _require_finite(x, "x_batch")
    pre, act = [], []
    a = x
    for w, b in zip(extractor.weights, extractor.biases):
        z = a @ w + b
        a = np.maximum(z, 0.0)
        pre.append(z)
        act.append(a)
    return ForwardPass(inputs=x, pre_activations=pre, activations=act)


def forward_features(x_batch, extractor: FeatureExtractor) -> Array:
    """Per-sample feature rows (all entries >= 0 after the final rectifier)."""
    return forward_pass(x_batch, extractor).features


def masked_cross_entropy(
    features, labels, classifier: LinearClassifier, mask, class_set
) -> CrossEntropyResult:
    """Softmax cross-entropy on mask-restricted features and prototypes.

    Logits are ``(z * mask) . (w_c * mask)`` with the softmax denominator
    running over ``class_set`` only. Returns the batch-mean loss, the
    probability rows, and gradient contributions that are exactly zero in
    every masked-out feature dimension (classifier columns included).
    """
    z = _as_matrix(features, "features")
    n, d = z.shape
    if n == 0:
        raise EmptyBatchError("cross-entropy needs at least one sample")
    if d != classifier.feature_dim:
        raise DimensionError(f"feature dim {d} != classifier dim {classifier.feature_dim}")
    bits = _mask_bits(mask, d)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} samples")

    classes = np.asarray(class_set, dtype=np.int64).ravel()
    if classes.size == 0:
        raise InvalidLabelError("class_set is empty")
    if np.unique(classes).size != classes.size:
        raise InvalidLabelError("class_set contains duplicates")
    if classes.min() < 0 or classes.max() >= classifier.class_count:
        raise InvalidLabelError(
            f"class_set exceeds the {classifier.class_count} constructed classes"
        )
    order = np.argsort(classes, kind="stable")
    sorted_classes = classes[order]
    slot = np.searchsorted(sorted_classes, y)
    bad = (slot >= classes.size) | (sorted_classes[np.minimum(slot, classes.size - 1)] != y)
    if bad.any():
        raise InvalidLabelError(f"label {int(y[bad.argmax()])} not in class_set")
    pos = order[slot]

    w_masked = classifier.weights[classes] * bits
    z_masked = z * bits
    logits = z_masked @ w_masked.T
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total

    rows = np.arange(n)
    log_norm = shift.ravel() + np.log(total.ravel())
    per_sample = log_norm - logits[rows, pos]
    loss = float(per_sample.mean())

    dlogits = probs.copy()
    dlogits[rows, pos] -= 1.0
    dlogits /= n
    feature_grad = dlogits @ w_masked
    classifier_grad = np.zeros_like(classifier.weights)
    classifier_grad[classes] = dlogits.T @ z_masked
    return CrossEntropyResult(loss, probs, per_sample, feature_grad, classifier_grad)


@dataclass
class GradientBundle:
    """Gradients shaped exactly like the model parameters they belong to."""

    weight_grads: list[Array]
    bias_grads: list[Array]
    classifier_grad: Array

    @classmethod
    def zeros_like(cls, model: ModelBundle) -> "GradientBundle":
        return cls(
            [np.zeros_like(w) for w in model.extractor.weights],
            [np.zeros_like(b) for b in model.extractor.biases],
            np.zeros_like(model.classifier.weights),
        )

    def scaled(self, factor: float) -> "GradientBundle":
        f = float(factor)
        return GradientBundle(
            [f * g for g in self.weight_grads],
            [f * g for g in self.bias_grads],
            f * self.classifier_grad,
        )

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        if len(self.weight_grads) != len(other.weight_grads):
            raise DimensionError("gradient bundles come from different architectures")
        return GradientBundle(
            [a + b for a, b in zip(self.weight_grads, other.weight_grads)],
            [a + b for a, b in zip(self.bias_grads, other.bias_grads)],
            self.classifier_grad + other.classifier_grad,
        )


def backward(model: ModelBundle, context: ForwardPass | None) -> GradientBundle:
    """Analytic gradients of the attached loss w.r.t. every parameter.

    Requires a forward pass with retained intermediates and an attached
    cross-entropy result; raises StateError otherwise.
    """
    if context is None or context.loss is None:
        raise StateError("backward() needs a forward pass with an attached loss")
    weights = model.extractor.weights
    if len(context.pre_activations) != len(weights):
        raise DimensionError("forward context does not match the model depth")
    if context.loss.feature_grad.shape[1] != model.feature_dim:
        raise DimensionError("attached loss gradient does not match the feature dim")

    weight_grads: list[Array] = [None] * len(weights)  # type: ignore[list-item]
    bias_grads: list[Array] = [None] * len(weights)  # type: ignore[list-item]
    g = context.loss.feature_grad * (context.pre_activations[-1] > 0.0)
    for i in range(len(weights) - 1, -1, -1):
        below = context.inputs if i == 0 else context.activations[i - 1]
        weight_grads[i] = below.T @ g
        bias_grads[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[i].T) * (context.pre_activations[i - 1] > 0.0)
    return GradientBundle(weight_grads, bias_grads, context.loss.classifier_grad.copy())


def sgd_step(model: ModelBundle, grads: GradientBundle, learning_rate: float) -> ModelBundle:
    """Plain gradient-descent update: every parameter becomes p - lr * g."""
    lr = float(learning_rate)
    if lr < 0.0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(grads.weight_grads) != len(model.extractor.weights):
        raise DimensionError("gradient bundle does not match the model depth")
    for i, (w, g) in enumerate(zip(model.extractor.weights, grads.weight_grads)):
        if w.shape != g.shape:
            raise DimensionError(f"extractor weight gradient [{i}] has shape {g.shape}, expected {w.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in extractor weights[{i}]")
    for i, (b, g) in enumerate(zip(model.extractor.biases, grads.bias_grads)):
        if b.shape != g.shape:
            raise DimensionError(f"extractor bias gradient [{i}] has shape {g.shape}, expected {b.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in extractor biases[{i}]")
    if grads.classifier_grad.shape != model.classifier.weights.shape:
        raise DimensionError("classifier gradient shape mismatch")
    if not np.isfinite(grads.classifier_grad).all():
        raise NumericError("non-finite gradient in classifier weights")

    new_weights = [w - lr * g for w, g in zip(model.extractor.weights, grads.weight_grads)]
    new_biases = [b - lr * g for b, g in zip(model.extractor.biases, grads.bias_grads)]
    new_head = model.classifier.weights - lr * grads.classifier_grad
    return ModelBundle(FeatureExtractor(new_weights, new_biases), LinearClassifier(new_head))
