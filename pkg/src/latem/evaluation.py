"""Zero-shot accuracy measurement, K sweeps, and per-matrix retrieval output."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import (
    ClassSet,
    ImageSet,
    ZeroShotSplit,
    apply_zscore,
    fit_zscore,
    subset_classes,
    subset_images,
)
from .errors import ValidationError
from .fileio import atomic_write_text
from .model import LatentModel, batch_scores
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class ClassAccuracy:
    class_id: str
    n_examples: int
    n_correct: int
    accuracy: float


@dataclass(frozen=True)
class Prediction:
    image_id: str
    predicted_class: str
    score: float
    latent_index: int


@dataclass(frozen=True)
class ZeroShotReport:
    accuracy: float
    per_class: tuple[ClassAccuracy, ...]
    predictions: tuple[Prediction, ...]


def per_class_top1(
    predictions: Sequence[str], labels: Sequence[str], eval_classes: Iterable[str]
) -> float:
    """Mean over classes of within-class top-1 accuracy.

    Robust to class imbalance: every class contributes equally regardless of
    its example count. Every class must have at least one labeled example.
    """
    eval_set = set(eval_classes)
    if not eval_set:
        raise ValidationError("evaluation class set is empty")
    if len(predictions) != len(labels):
        raise ValidationError(
            f"{len(predictions)} predictions for {len(labels)} labels"
        )
    totals = {c: 0 for c in eval_set}
    correct = {c: 0 for c in eval_set}
    for pred, lab in zip(predictions, labels):
        if lab not in eval_set:
            raise ValidationError(f"label '{lab}' outside the evaluation classes")
        totals[lab] += 1
        if pred == lab:
            correct[lab] += 1
    for c in sorted(eval_set):
        if totals[c] == 0:
            raise ValidationError(f"class '{c}' has no labeled examples")
    return float(np.mean([correct[c] / totals[c] for c in eval_set]))


def _check_disjoint_from_training(model: LatentModel, test_classes: ClassSet) -> None:
    trained_on = model.metadata.get("train_classes")
    if trained_on:
        overlap = set(trained_on) & set(test_classes.class_ids)
        if overlap:
            raise ValidationError(
                f"train/test class overlap: {sorted(overlap)}"
            )


def _build_report(
    images: ImageSet,
    test_classes: ClassSet,
    scores: np.ndarray,
    indices: np.ndarray,
) -> ZeroShotReport:
    pred_col = scores.argmax(axis=1)
    predictions = []
    for n in range(images.n):
        c = int(pred_col[n])
        predictions.append(
            Prediction(
                images.ids[n],
                test_classes.class_ids[c],
                float(scores[n, c]),
                int(indices[n, c]),
            )
        )
    pred_ids = [p.predicted_class for p in predictions]
    accuracy = per_class_top1(pred_ids, images.labels, test_classes.class_ids)
    per_class = []
    for cid in test_classes.class_ids:
        idx = [i for i, lab in enumerate(images.labels) if lab == cid]
        n_corr = sum(1 for i in idx if pred_ids[i] == cid)
        per_class.append(ClassAccuracy(cid, len(idx), n_corr, n_corr / len(idx)))
    return ZeroShotReport(accuracy, tuple(per_class), tuple(predictions))


def evaluate_zero_shot(
    model: LatentModel, test_images: ImageSet, test_classes: ClassSet
) -> ZeroShotReport:
    """Normalize, predict with the test classes as the only candidates, score.

    Test class ids must be disjoint from the classes the model was trained on
    (checked against the model metadata when present).
    """
    _check_disjoint_from_training(model, test_classes)
    if model.norm_stats is None:
        raise ValidationError("model carries no normalization stats")
    images = apply_zscore(test_images, model.norm_stats)
    scores, indices = batch_scores(model, images.features, test_classes.embeddings)
    return _build_report(images, test_classes, scores, indices)


def evaluate_zero_shot_fused(
    models: Sequence[LatentModel],
    test_images: ImageSet,
    test_classsets: Sequence[ClassSet],
) -> ZeroShotReport:
    """Late fusion: average the per-model latent scores, then predict.

    Each model is paired with its own class-embedding source; all sources
    must list the candidate classes in the same order. The latent index is
    not meaningful across models, so prediction rows carry -1.
    """
    if not models:
        raise ValidationError("late fusion requires at least one model")
    if len(models) != len(test_classsets):
        raise ValidationError(
            f"got {len(models)} models but {len(test_classsets)} class sets"
        )
    base_ids = test_classsets[0].class_ids
    for cs in test_classsets[1:]:
        if cs.class_ids != base_ids:
            raise ValidationError("class sets disagree on candidate ids or order")
    total = None
    for m, cs in zip(models, test_classsets):
        _check_disjoint_from_training(m, cs)
        if m.norm_stats is None:
            raise ValidationError("model carries no normalization stats")
        images = apply_zscore(test_images, m.norm_stats)
        scores, _ = batch_scores(m, images.features, cs.embeddings)
        total = scores if total is None else total + scores
    mean_scores = total / len(models)
    indices = np.full(mean_scores.shape, -1, dtype=np.intp)
    return _build_report(test_images, test_classsets[0], mean_scores, indices)


def k_sweep(
    base_config: TrainConfig,
    k_grid: Sequence[int],
    images: ImageSet,
    classes: ClassSet,
    split: ZeroShotSplit,
    n_seeds: int,
) -> list[tuple[int, float, float]]:
    """Train/evaluate per (K, seed); rows are (K, mean accuracy, std error).

    Seeds are ``base_config.seed + i``. Models train on the split's train
    classes and are evaluated on its test classes. The standard error is the
    sample standard deviation over seeds divided by sqrt(n_seeds).
    """
    if not k_grid:
        raise ValidationError("K grid is empty")
    if n_seeds < 1:
        raise ValidationError(f"n_seeds must be >=1, got {n_seeds}")
    stats = fit_zscore(images, split.train_classes)
    tr_imgs = apply_zscore(subset_images(images, split.train_classes), stats)
    tr_cls = subset_classes(classes, split.train_classes)
    te_imgs = subset_images(images, split.test_classes)
    te_cls = subset_classes(classes, split.test_classes)
    rows = []
    for k in k_grid:
        accs = []
        for i in range(n_seeds):
            cfg = dataclasses.replace(base_config, k=int(k), seed=base_config.seed + i)
            model = train(cfg, tr_imgs, tr_cls, norm_stats=stats)
            accs.append(evaluate_zero_shot(model, te_imgs, te_cls).accuracy)
        mean = float(np.mean(accs))
        stderr = float(np.std(accs, ddof=1) / np.sqrt(n_seeds)) if n_seeds > 1 else 0.0
        rows.append((int(k), mean, stderr))
    return rows


def top_items_per_matrix(
    model: LatentModel, images: ImageSet, classes: ClassSet, n_top: int
) -> dict[int, list[tuple[str, float]]]:
    """Group images by the matrix achieving their predicted class's score.

    Within each group images are ranked by descending achieved score; at most
    ``n_top`` ids are kept per matrix. The groups partition the image set
    (before truncation). Images are scored as given; normalize first if the
    model expects z-scored inputs.
    """
    if n_top < 1:
        raise ValidationError(f"n_top must be >=1, got {n_top}")
    scores, indices = batch_scores(model, images.features, classes.embeddings)
    pred_col = scores.argmax(axis=1)
    groups: dict[int, list[tuple[str, float]]] = {k: [] for k in range(model.k)}
    for n in range(images.n):
        c = int(pred_col[n])
        groups[int(indices[n, c])].append((images.ids[n], float(scores[n, c])))
    for k in groups:
        members = sorted(
            enumerate(groups[k]), key=lambda item: (-item[1][1], item[0])
        )
        groups[k] = [entry for _, entry in members[:n_top]]
    return groups


def write_per_class_csv(report: ZeroShotReport, path) -> None:
    lines = ["class_id,n,correct,accuracy"]
    lines += [
        f"{r.class_id},{r.n_examples},{r.n_correct},{r.accuracy!r}"
        for r in report.per_class
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_predictions_csv(report: ZeroShotReport, path) -> None:
    lines = ["image_id,predicted_class,score,latent_index"]
    lines += [
        f"{p.image_id},{p.predicted_class},{p.score!r},{p.latent_index}"
        for p in report.predictions
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_ksweep_csv(rows: Sequence[tuple[int, float, float]], path) -> None:
    lines = ["k,mean_accuracy,std_error"]
    lines += [f"{k},{mean!r},{stderr!r}" for k, mean, stderr in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_matrix_top_csv(groups: dict[int, list[tuple[str, float]]], path) -> None:
    lines = ["matrix_index,rank,image_id,score"]
    for k in sorted(groups):
        for rank, (image_id, score) in enumerate(groups[k], start=1):
            lines.append(f"{k},{rank},{image_id},{score!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
