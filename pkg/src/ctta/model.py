"""Frozen linear source model with additive input-space prompts.

The source model is a fixed feature extractor followed by a softmax head.
Adaptation never touches its weights; all test-time capacity lives in the
prompt vectors added to the inputs before extraction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import (
    BatchStats,
    Matrix,
    SeededRng,
    Vector,
    as_matrix,
    as_sample_batch,
    as_vector,
    batch_stats,
)


@dataclass(frozen=True)
class ToyModel:
    """Linear extractor plus softmax head; immutable once constructed."""

    extractor: Matrix      # (feature_dim, input_dim)
    head_weight: Matrix    # (num_classes, feature_dim)
    head_bias: Vector      # (num_classes,)

    def __post_init__(self):
        a = as_matrix(self.extractor, name="extractor")
        w = as_matrix(self.head_weight, name="head_weight")
        c = as_vector(self.head_bias, name="head_bias")
        if w.shape[1] != a.shape[0]:
            raise ValueError(
                f"head expects feature dim {w.shape[1]}, extractor produces {a.shape[0]}"
            )
        if c.shape[0] != w.shape[0]:
            raise ValueError("head bias dimension must match class count")
        for arr in (a, w, c):
            arr.setflags(write=False)
        object.__setattr__(self, "extractor", a)
        object.__setattr__(self, "head_weight", w)
        object.__setattr__(self, "head_bias", c)

    @property
    def input_dim(self) -> int:
        return self.extractor.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.extractor.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def weight_bytes(self) -> bytes:
        """Byte image of all weights, for frozen-model assertions."""
        return (
            self.extractor.tobytes()
            + self.head_weight.tobytes()
            + self.head_bias.tobytes()
        )


def _row_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _predict(model: ToyModel, inputs: Matrix) -> tuple[Matrix, Matrix]:
    features = inputs @ model.extractor.T
    logits = features @ model.head_weight.T + model.head_bias
    return features, _row_softmax(logits)


def forward(model: ToyModel, batch, domain_prompt, class_prompts) -> tuple[Matrix, Matrix]:
    """Prompted forward pass.

    Adds the shared domain prompt and one class prompt per sample to the
    inputs, then extracts features and predicts. Returns ``(features, probs)``
    as (b, feature_dim) and (b, num_classes) arrays; the features are the ones
    the alignment loss statistics are computed from.
    """
    x = as_sample_batch(batch, dim=model.input_dim)
    p_d = as_vector(domain_prompt, dim=model.input_dim, name="domain prompt")
    p_c = as_sample_batch(class_prompts, dim=model.input_dim, name="class prompts")
    if p_c.shape[0] != x.shape[0]:
        raise ValueError(
            f"need one class prompt per sample: got {p_c.shape[0]} for batch of {x.shape[0]}"
        )
    return _predict(model, x + p_d + p_c)


def pseudo_labels(model: ToyModel, batch) -> Matrix:
    """Prompt-free predictions, one probability row per sample."""
    x = as_sample_batch(batch, dim=model.input_dim)
    return _predict(model, x)[1]


def key_stats(model: ToyModel, batch) -> BatchStats:
    """Batch statistics of prompt-free features, used as the domain matching key.

    Deliberately independent of any prompt so matching can precede prompt
    composition.
    """
    x = as_sample_batch(batch, dim=model.input_dim)
    if x.shape[0] < 2:
        raise ValueError("key_stats needs a batch of >= 2 samples")
    return batch_stats(x @ model.extractor.T)


def make_class_means(num_classes: int, input_dim: int, rng: SeededRng, scale: float = 1.0) -> Matrix:
    """Random per-class mean vectors, rows indexed by class id."""
    if num_classes < 1 or input_dim < 1:
        raise ValueError("num_classes and input_dim must be positive")
    return rng.normal(size=(num_classes, input_dim), scale=scale)


def draw_labeled_samples(
    class_means: Matrix, n: int, noise_std: float, rng: SeededRng
) -> tuple[Matrix, np.ndarray]:
    """Balanced labeled draw around the class means (source-domain sampling)."""
    means = as_matrix(class_means, name="class_means")
    num_classes = means.shape[0]
    labels = np.array([k % num_classes for k in range(n)], dtype=np.int64)
    labels = rng.permutation(labels)
    noise = rng.normal(size=(n, means.shape[1]), scale=noise_std) if noise_std > 0 else 0.0
    return means[labels] + noise, labels


def fit_head(
    features: Matrix,
    labels: np.ndarray,
    num_classes: int,
    *,
    lr: float = 1.0,
    max_iters: int = 600,
    tol: float = 1e-6,
    l2: float = 1e-2,
) -> tuple[Matrix, Vector]:
    """Multinomial logistic regression by full-batch gradient descent.

    A small L2 term keeps the optimum finite when the classes are separable;
    iteration stops once the gradient infinity-norm drops below ``tol``.
    """
    z = as_matrix(features, name="features")
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((num_classes, z.shape[1]))
    c = np.zeros(num_classes)
    for _ in range(max_iters):
        probs = _row_softmax(z @ w.T + c)
        delta = (probs - onehot) / n
        gw = delta.T @ z + l2 * w
        gc = delta.sum(axis=0)
        if max(np.abs(gw).max(), np.abs(gc).max()) < tol:
            break
        w -= lr * gw
        c -= lr * gc
    return w, c


def fit_source_model(
    input_dim: int,
    feature_dim: int,
    class_means: Matrix,
    noise_std: float,
    rng: SeededRng,
    *,
    n_samples: int = 400,
) -> ToyModel:
    """Draw the extractor and fit the head on synthetic labeled source data.

    The extractor is a seeded Gaussian scaled by 1/sqrt(input_dim); the head
    is fit on extracted features so the frozen model is a genuine source
    classifier rather than a random map.
    """
    extractor = rng.child(0).normal(size=(feature_dim, input_dim)) / np.sqrt(input_dim)
    x, y = draw_labeled_samples(class_means, n_samples, noise_std, rng.child(1))
    w, c = fit_head(x @ extractor.T, y, class_means.shape[0])
    return ToyModel(extractor, w, c)


def save_model(model: ToyModel, path, *, seed: int | None = None) -> None:
    """Write a JSON snapshot (dims, weights, optional seed); exact float round-trip."""
    doc = {
        "input_dim": model.input_dim,
        "feature_dim": model.feature_dim,
        "num_classes": model.num_classes,
        "seed": seed,
        "extractor": model.extractor.tolist(),
        "head_weight": model.head_weight.tolist(),
        "head_bias": model.head_bias.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> ToyModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    model = ToyModel(
        as_matrix(doc["extractor"], shape=(doc["feature_dim"], doc["input_dim"])),
        as_matrix(doc["head_weight"], shape=(doc["num_classes"], doc["feature_dim"])),
        as_vector(doc["head_bias"], dim=doc["num_classes"]),
    )
    return model
