"""Ranking hinge loss, empirical risk, and violator sampling."""

from __future__ import annotations

import numpy as np

from .data import ClassSet, ImageSet, check_labels_known
from .errors import ValidationError
from .model import LatentModel, _check_vector, score_latent


def delta(y_a: str, y_b: str) -> float:
    """0/1 disagreement between class ids."""
    return 0.0 if y_a == y_b else 1.0


def hinge_term(
    model: LatentModel,
    x: np.ndarray,
    y_true: np.ndarray,
    y_other: np.ndarray,
    same_class: bool,
) -> float:
    """max(0, d + F(x, y_other) - F(x, y_true)) with d = 0 iff same class."""
    d = 0.0 if same_class else 1.0
    return max(
        0.0,
        d + score_latent(model, x, y_other).score - score_latent(model, x, y_true).score,
    )


def example_loss(model: LatentModel, x: np.ndarray, true_class: str, classes: ClassSet) -> float:
    """Sum of hinge terms over every class; the true-class term is identically 0.

    (With d = 0 and F - F = 0 the true-class hinge vanishes, so it is skipped.)
    """
    t = classes.index_of(true_class)
    x = _check_vector(x, model.d_x, "x")
    per_matrix = (x @ model.matrices) @ classes.embeddings.T  # (K, C)
    scores = per_matrix.max(axis=0)
    margins = scores - scores[t] + 1.0
    margins[t] = 0.0
    return float(np.maximum(margins, 0.0).sum())


def empirical_risk(model: LatentModel, images: ImageSet, classes: ClassSet) -> float:
    """Mean of per-example ranking losses over an image set."""
    if images.n == 0:
        raise ValidationError("empirical risk of an empty image set is undefined")
    check_labels_known(images, classes)
    total = 0.0
    for i in range(images.n):
        total += example_loss(model, images.features[i], images.labels[i], classes)
    return total / images.n


def sample_violator(classes: ClassSet, true_class: str, rng: np.random.Generator) -> str:
    """Uniformly random class id different from ``true_class``."""
    if classes.n < 2:
        raise ValidationError("violator sampling needs at least 2 classes")
    t = classes.index_of(true_class)
    j = int(rng.integers(classes.n - 1))
    if j >= t:
        j += 1
    return classes.class_ids[j]


def example_loss_gradient(
    model: LatentModel, x: np.ndarray, true_class: str, classes: ClassSet
) -> np.ndarray:
    """Gradient of ``example_loss`` w.r.t. each matrix, shape (K, d_x, d_y).

    Each violating class y contributes +x y^T to its achieving matrix and
    -x y_true^T to the true class's achieving matrix. This is a subgradient;
    it equals the gradient wherever all achieving indices are unique and no
    hinge margin sits exactly at zero.
    """
    t = classes.index_of(true_class)
    x = _check_vector(x, model.d_x, "x")
    emb = classes.embeddings
    per_matrix = (x @ model.matrices) @ emb.T  # (K, C)
    scores = per_matrix.max(axis=0)
    achieving = per_matrix.argmax(axis=0)
    grads = np.zeros_like(model.matrices)
    j_star = int(achieving[t])
    y_true = emb[t]
    for c in range(classes.n):
        if c == t:
            continue
        if 1.0 + scores[c] - scores[t] > 0.0:
            grads[int(achieving[c])] += np.outer(x, emb[c])
            grads[j_star] -= np.outer(x, y_true)
    return grads
