"""SGD optimization of the latent model, with sampled and max-violator losses.

Each training step draws (or searches for) a wrong class for one example and,
when the margin is violated, applies rank-1 updates to the matrices achieving
the wrong-class and true-class scores. Training is strictly sequential and
fully determined by the config seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import ClassSet, ImageSet, NormStats, check_labels_known
from .errors import NumericError, ValidationError
from .model import LatentModel

RANKING_SAMPLED = "ranking_sampled"
MAX_VIOLATOR = "max_violator"
_VARIANTS = (RANKING_SAMPLED, MAX_VIOLATOR)


@dataclass(frozen=True)
class TrainConfig:
    k: int
    eta: float
    seed: int
    epochs: int = 150
    loss_variant: str = RANKING_SAMPLED

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"K must be >=1, got {self.k}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >=1, got {self.epochs}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValidationError(f"eta must be a positive real, got {self.eta}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        if self.loss_variant not in _VARIANTS:
            raise ValidationError(
                f"loss_variant must be one of {_VARIANTS}, got '{self.loss_variant}'"
            )


@dataclass(frozen=True)
class UpdateEvent:
    """Outcome of one SGD step; ``updated`` is empty iff no margin violation."""

    violated: bool
    i_star: int | None
    j_star: int | None
    updated: frozenset[int]


def init_model(d_x: int, d_y: int, k: int, seed: int) -> LatentModel:
    """K matrices with i.i.d. Gaussian entries of mean 0 and std 1/sqrt(d_x)."""
    if min(d_x, d_y, k) < 1:
        raise ValidationError(f"d_x, d_y and K must be >=1, got ({d_x}, {d_y}, {k})")
    rng = np.random.default_rng(seed)
    mats = rng.normal(0.0, 1.0 / np.sqrt(d_x), size=(k, d_x, d_y))
    return LatentModel(mats, None, {"seed": int(seed), "epochs": 0, "loss_variant": None})


def _step(
    mats: np.ndarray, x: np.ndarray, y_true: np.ndarray, y_wrong: np.ndarray, eta: float
) -> tuple[bool, int, int]:
    """Apply one update in place; returns (violated, i_star, j_star)."""
    xw = x @ mats  # (K, d_y)
    s_wrong = xw @ y_wrong
    s_true = xw @ y_true
    f_wrong = s_wrong.max()
    f_true = s_true.max()
    if not (np.isfinite(f_wrong) and np.isfinite(f_true)):
        raise NumericError("non-finite compatibility scores: model has blown up")
    if f_wrong + 1.0 <= f_true:
        return False, -1, -1
    i_star = int(s_wrong.argmax())
    j_star = int(s_true.argmax())
    if i_star == j_star:
        mats[i_star] -= eta * np.outer(x, y_wrong - y_true)
        if not np.isfinite(mats[i_star]).all():
            raise NumericError("non-finite matrix entries after update")
    else:
        mats[i_star] -= eta * np.outer(x, y_wrong)
        mats[j_star] += eta * np.outer(x, y_true)
        if not (np.isfinite(mats[i_star]).all() and np.isfinite(mats[j_star]).all()):
            raise NumericError("non-finite matrix entries after update")
    return True, i_star, j_star


def sgd_step(
    model: LatentModel,
    x: np.ndarray,
    y_true: np.ndarray,
    y_wrong: np.ndarray,
    eta: float,
) -> UpdateEvent:
    """One margin-violation check and (if violated) in-place update.

    No change when F(x, y_wrong) + 1 <= F(x, y_true). Otherwise the matrices
    achieving the wrong and true scores (i*, j*, ties to the lowest index)
    are updated: a single combined rank-1 step when i* == j*, or one rank-1
    step each when they differ.
    """
    x = np.asarray(x, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    y_wrong = np.asarray(y_wrong, dtype=np.float64)
    if x.shape != (model.d_x,):
        raise ValidationError(f"x must have shape ({model.d_x},), got {x.shape}")
    if y_true.shape != (model.d_y,) or y_wrong.shape != (model.d_y,):
        raise ValidationError(
            f"class vectors must have shape ({model.d_y},), "
            f"got {y_true.shape} and {y_wrong.shape}"
        )
    if not (np.isfinite(x).all() and np.isfinite(y_true).all() and np.isfinite(y_wrong).all()):
        raise NumericError("non-finite inputs to sgd_step")
    if not np.isfinite(eta):
        raise NumericError("non-finite learning rate")
    violated, i_star, j_star = _step(model.matrices, x, y_true, y_wrong, eta)
    if not violated:
        return UpdateEvent(False, None, None, frozenset())
    updated = {i_star} if i_star == j_star else {i_star, j_star}
    return UpdateEvent(True, i_star, j_star, frozenset(updated))


def _label_indices(images: ImageSet, classes: ClassSet) -> np.ndarray:
    return np.array([classes.index_of(lab) for lab in images.labels], dtype=np.intp)


def run_epoch(
    model: LatentModel,
    train_images: ImageSet,
    train_classes: ClassSet,
    eta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One pass over the training set in a freshly shuffled order.

    For each example one violator class is sampled uniformly from the other
    training classes; on every margin violation the support count of the
    true-class achieving matrix j* is incremented. Returns the counts (K,).
    """
    c = train_classes.n
    if c < 2:
        raise ValidationError("training needs at least 2 classes")
    if train_images.n == 0:
        raise ValidationError("training needs at least 1 image")
    mats = model.matrices
    feats = train_images.features
    emb = train_classes.embeddings
    label_idx = _label_indices(train_images, train_classes)
    counts = np.zeros(model.k, dtype=np.int64)
    order = rng.permutation(train_images.n)
    draws = rng.integers(0, c - 1, size=train_images.n)
    for pos, n in enumerate(order):
        t = label_idx[n]
        w = draws[pos]
        if w >= t:
            w += 1
        violated, _, j_star = _step(mats, feats[n], emb[t], emb[w], eta)
        if violated:
            counts[j_star] += 1
    return counts


def _max_violator_epoch(
    model: LatentModel,
    train_images: ImageSet,
    train_classes: ClassSet,
    eta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Like ``run_epoch`` but the wrong class maximizes d + F over the other
    training classes (one full pass over classes per example)."""
    c = train_classes.n
    if c < 2:
        raise ValidationError("training needs at least 2 classes")
    if train_images.n == 0:
        raise ValidationError("training needs at least 1 image")
    mats = model.matrices
    feats = train_images.features
    emb_t = train_classes.embeddings.T
    label_idx = _label_indices(train_images, train_classes)
    counts = np.zeros(model.k, dtype=np.int64)
    order = rng.permutation(train_images.n)
    for n in order:
        x = feats[n]
        t = label_idx[n]
        scores = ((x @ mats) @ emb_t).max(axis=0)  # (C,)
        scores[t] = -np.inf
        w = int(scores.argmax())
        violated, _, j_star = _step(mats, x, train_classes.embeddings[t], train_classes.embeddings[w], eta)
        if violated:
            counts[j_star] += 1
    return counts


def _epoch_rng(seed: int) -> np.random.Generator:
    # stream disjoint from init_model's default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


def build_metadata(
    config: TrainConfig,
    train_classes: ClassSet,
    d_x: int,
    d_y: int,
    support_counts: np.ndarray,
    k_init: int,
    prune_history: list | None = None,
) -> dict:
    return {
        "seed": int(config.seed),
        "epochs": int(config.epochs),
        "eta": float(config.eta),
        "loss_variant": config.loss_variant,
        "k": int(support_counts.shape[0]),
        "k_init": int(k_init),
        "d_x": int(d_x),
        "d_y": int(d_y),
        "support_counts": [int(v) for v in support_counts],
        "train_classes": sorted(train_classes.class_ids),
        "prune_history": prune_history or [],
    }


def train(
    config: TrainConfig,
    train_images: ImageSet,
    train_classes: ClassSet,
    norm_stats: NormStats | None = None,
) -> LatentModel:
    """Initialize and run ``config.epochs`` passes of the configured variant.

    Inputs are expected to be normalized already (z-scored images, unit-norm
    class embeddings); ``norm_stats`` is stowed on the model for later use at
    prediction time. Cumulative support counts land in the metadata.
    """
    check_labels_known(train_images, train_classes)
    if train_classes.n < 2:
        raise ValidationError("training needs at least 2 classes")
    model = init_model(train_images.d_x, train_classes.d_y, config.k, config.seed)
    rng = _epoch_rng(config.seed)
    epoch_fn = _max_violator_epoch if config.loss_variant == MAX_VIOLATOR else run_epoch
    totals = np.zeros(config.k, dtype=np.int64)
    for _ in range(config.epochs):
        totals += epoch_fn(model, train_images, train_classes, config.eta, rng)
    model.norm_stats = norm_stats
    model.metadata = build_metadata(
        config, train_classes, model.d_x, model.d_y, totals, k_init=config.k
    )
    return model


def train_max_violator(
    config: TrainConfig,
    train_images: ImageSet,
    train_classes: ClassSet,
    norm_stats: NormStats | None = None,
) -> LatentModel:
    """Train with the max-violator (multiclass hinge) class choice."""
    return train(
        dataclasses.replace(config, loss_variant=MAX_VIOLATOR),
        train_images,
        train_classes,
        norm_stats,
    )
