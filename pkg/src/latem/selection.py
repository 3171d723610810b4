"""Choosing the number of latent matrices: cross-validation and pruning."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    ClassSet,
    ImageSet,
    ZeroShotSplit,
    apply_zscore,
    check_labels_known,
    fit_zscore,
    subset_classes,
    subset_images,
)
from .errors import ValidationError
from .evaluation import evaluate_zero_shot
from .fileio import atomic_write_text
from .model import LatentModel
from .trainer import (
    MAX_VIOLATOR,
    TrainConfig,
    _epoch_rng,
    _max_violator_epoch,
    build_metadata,
    init_model,
    run_epoch,
    train,
)


@dataclass(frozen=True)
class PruneConfig:
    k_init: int = 16
    prune_period: int = 5
    support_fraction: float = 0.05

    def __post_init__(self) -> None:
        if self.k_init < 1:
            raise ValidationError(f"k_init must be >=1, got {self.k_init}")
        if self.prune_period < 1:
            raise ValidationError(f"prune_period must be >=1, got {self.prune_period}")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValidationError(
                f"support_fraction must be in (0, 1), got {self.support_fraction}"
            )


def surviving_indices(window_counts, support_fraction: float) -> list[int]:
    """Matrix indices whose support count reaches the fraction threshold.

    The threshold denominator is the total number of counted events in the
    window rather than the number of training examples, which keeps the rule
    meaningful late in training when violations are rare. If nothing reaches
    the threshold, the single top-supported matrix survives (lowest index on
    ties).
    """
    counts = np.asarray(window_counts, dtype=np.float64)
    threshold = support_fraction * counts.sum()
    keep = [i for i in range(counts.shape[0]) if counts[i] >= threshold]
    if not keep:
        keep = [int(counts.argmax())]
    return keep


def train_with_pruning(
    prune_config: PruneConfig,
    base_config: TrainConfig,
    train_images: ImageSet,
    train_classes: ClassSet,
    norm_stats=None,
    cumulative: bool = False,
) -> LatentModel:
    """Train starting from ``k_init`` matrices, pruning low-support ones.

    Every ``prune_period`` epochs the matrices whose support since the last
    prune event falls below ``support_fraction`` of the window's events are
    dropped (at least one always survives). With ``cumulative=True`` counts
    accumulate over the whole run instead of per window.
    """
    check_labels_known(train_images, train_classes)
    if train_classes.n < 2:
        raise ValidationError("training needs at least 2 classes")
    model = init_model(
        train_images.d_x, train_classes.d_y, prune_config.k_init, base_config.seed
    )
    rng = _epoch_rng(base_config.seed)
    epoch_fn = (
        _max_violator_epoch if base_config.loss_variant == MAX_VIOLATOR else run_epoch
    )
    window = np.zeros(model.k, dtype=np.int64)
    totals = np.zeros(model.k, dtype=np.int64)
    history: list[dict] = []
    for epoch in range(1, base_config.epochs + 1):
        counts = epoch_fn(model, train_images, train_classes, base_config.eta, rng)
        window += counts
        totals += counts
        if epoch % prune_config.prune_period == 0:
            basis = totals if cumulative else window
            keep = surviving_indices(basis, prune_config.support_fraction)
            history.append(
                {
                    "epoch": epoch,
                    "counts": [int(v) for v in basis],
                    "kept": keep,
                    "k_after": len(keep),
                }
            )
            if len(keep) < model.k:
                model.matrices = model.matrices[keep]
                totals = totals[keep]
            window = np.zeros(model.k, dtype=np.int64)
    model.norm_stats = norm_stats
    model.metadata = build_metadata(
        base_config,
        train_classes,
        model.d_x,
        model.d_y,
        totals,
        k_init=prune_config.k_init,
        prune_history=history,
    )
    return model


def _cv_fold_inputs(
    images: ImageSet, classes: ClassSet, fold: ZeroShotSplit
) -> tuple[ImageSet, ClassSet, ImageSet, ClassSet, object]:
    if not fold.train_classes:
        raise ValidationError("cross-validation fold has an empty train partition")
    if not fold.val_classes:
        raise ValidationError("cross-validation fold has an empty val partition")
    stats = fit_zscore(images, fold.train_classes)
    tr_imgs = apply_zscore(subset_images(images, fold.train_classes), stats)
    tr_cls = subset_classes(classes, fold.train_classes)
    val_imgs = subset_images(images, fold.val_classes)
    if val_imgs.n == 0:
        raise ValidationError("cross-validation fold has no validation images")
    val_cls = subset_classes(classes, fold.val_classes)
    return tr_imgs, tr_cls, val_imgs, val_cls, stats


def cross_validate_k(
    grid: Sequence[int],
    base_config: TrainConfig,
    train_images: ImageSet,
    train_classes: ClassSet,
    cv_split: ZeroShotSplit,
    extra_folds: Sequence[ZeroShotSplit] = (),
    n_workers: int | None = None,
) -> tuple[int, list[tuple[int, float]]]:
    """Accuracy-maximizing K over a grid, using zero-shot validation folds.

    Each arm trains on the fold's train classes (z-score stats fitted per
    fold) and is scored by average per-class top-1 on the fold's val classes,
    with the val classes as the only candidates. Returns the best K (ties go
    to the smallest K) and the full (K, accuracy) table in grid order.
    """
    if not grid:
        raise ValidationError("cross-validation grid is empty")
    available = set(train_classes.class_ids)
    folds = [cv_split, *extra_folds]
    for fold in folds:
        if not (fold.train_classes <= available and fold.val_classes <= available):
            raise ValidationError(
                "cross-validation fold references classes outside the training set"
            )
    prepared = [_cv_fold_inputs(train_images, train_classes, fold) for fold in folds]

    def run_arm(k: int) -> float:
        accs = []
        for tr_imgs, tr_cls, val_imgs, val_cls, stats in prepared:
            cfg = dataclasses.replace(base_config, k=k)
            arm_model = train(cfg, tr_imgs, tr_cls, norm_stats=stats)
            accs.append(evaluate_zero_shot(arm_model, val_imgs, val_cls).accuracy)
        return float(np.mean(accs))

    if n_workers is None:
        n_workers = max(1, int(os.environ.get("LATEM_THREADS", "1")))
    ks = [int(k) for k in grid]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            accuracies = list(pool.map(run_arm, ks))
    else:
        accuracies = [run_arm(k) for k in ks]
    table = list(zip(ks, accuracies))
    best_acc = max(accuracies)
    best_k = min(k for k, acc in table if acc == best_acc)
    return best_k, table


def write_cv_table(table: Sequence[tuple[int, float]], path) -> None:
    lines = ["k,accuracy"]
    lines += [f"{k},{acc!r}" for k, acc in table]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_prune_history(history: Sequence[dict], path) -> None:
    """One row per prune event: ``epoch,k_after,count_0,...`` (ragged after
    prunes since the count vector shrinks with the model)."""
    lines = []
    for event in history:
        fields = [str(event["epoch"]), str(event["k_after"])]
        fields += [str(c) for c in event["counts"]]
        lines.append(",".join(fields))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
