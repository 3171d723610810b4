"""Piecewise-linear compatibility scoring and zero-shot prediction.

A model holds K matrices W_i of shape (d_x, d_y); the compatibility of an
image vector x with a class vector y is max_i x @ W_i @ y, and prediction is
the argmax of that score over candidate classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import ClassSet, NormStats
from .errors import ValidationError


@dataclass(eq=False)
class LatentModel:
    """K stacked compatibility matrices plus training-time normalization stats.

    ``matrices`` has shape (K, d_x, d_y) and stays writable: the trainer
    updates it in place. Treat instances as immutable once training ends.
    """

    matrices: np.ndarray
    norm_stats: NormStats | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        mats = np.array(self.matrices, dtype=np.float64, order="C")
        if mats.ndim != 3:
            raise ValidationError(
                f"matrices must have shape (K, d_x, d_y), got ndim={mats.ndim}"
            )
        if mats.shape[0] < 1:
            raise ValidationError("K must be >= 1")
        if not np.isfinite(mats).all():
            raise ValidationError("model matrices contain NaN/Inf entries")
        self.matrices = mats

    @property
    def k(self) -> int:
        return int(self.matrices.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.matrices.shape[1])

    @property
    def d_y(self) -> int:
        return int(self.matrices.shape[2])


@dataclass(frozen=True)
class ScoredChoice:
    """A latent score together with the matrix index achieving it."""

    score: float
    index: int


def _check_vector(v: np.ndarray, dim: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise ValidationError(f"{name} must have shape ({dim},), got {v.shape}")
    return v


def score_bilinear(x: np.ndarray, w: np.ndarray, y: np.ndarray) -> float:
    """Compatibility of a single matrix: x @ W @ y."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError(f"W must be 2-D, got ndim={w.ndim}")
    x = _check_vector(x, w.shape[0], "x")
    y = _check_vector(y, w.shape[1], "y")
    return float(x @ w @ y)


def score_latent(model: LatentModel, x: np.ndarray, y: np.ndarray) -> ScoredChoice:
    """max_i x @ W_i @ y and the achieving index; ties go to the lowest index."""
    x = _check_vector(x, model.d_x, "x")
    y = _check_vector(y, model.d_y, "y")
    scores = (x @ model.matrices) @ y  # (K,)
    i = int(np.argmax(scores))
    return ScoredChoice(float(scores[i]), i)


def class_scores(model: LatentModel, x: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Latent scores of one image against every row of ``embeddings``; (C,)."""
    x = _check_vector(x, model.d_x, "x")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != model.d_y:
        raise ValidationError(
            f"embeddings must have shape (C, {model.d_y}), got {embeddings.shape}"
        )
    per_matrix = (x @ model.matrices) @ embeddings.T  # (K, C)
    return per_matrix.max(axis=0)


def batch_scores(
    model: LatentModel, features: np.ndarray, embeddings: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Latent scores and achieving indices for a whole image matrix.

    Returns ``(scores, indices)``, both (N, C); ties go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.d_x:
        raise ValidationError(
            f"features must have shape (N, {model.d_x}), got {features.shape}"
        )
    if embeddings.ndim != 2 or embeddings.shape[1] != model.d_y:
        raise ValidationError(
            f"embeddings must have shape (C, {model.d_y}), got {embeddings.shape}"
        )
    stacked = np.stack(
        [(features @ w) @ embeddings.T for w in model.matrices]
    )  # (K, N, C)
    return stacked.max(axis=0), stacked.argmax(axis=0)


def predict(model: LatentModel, x: np.ndarray, candidates: ClassSet) -> str:
    """Class id with the maximum latent score; ties go to earliest file order.

    ``x`` must already be normalized with the model's training stats.
    """
    if candidates.n == 0:
        raise ValidationError("empty candidate set")
    scores = class_scores(model, x, candidates.embeddings)
    return candidates.class_ids[int(np.argmax(scores))]


def score_late_fusion(
    models: Sequence[LatentModel], x: np.ndarray, ys: Sequence[np.ndarray]
) -> float:
    """Arithmetic mean of per-model latent scores.

    Each model scores the same image against its own embedding of the class,
    so the caller supplies one y vector per model.
    """
    if not models:
        raise ValidationError("score_late_fusion requires at least one model")
    if len(ys) != len(models):
        raise ValidationError(
            f"got {len(models)} models but {len(ys)} class vectors"
        )
    total = 0.0
    for m, y in zip(models, ys):
        total += score_latent(m, x, y).score
    return total / len(models)
