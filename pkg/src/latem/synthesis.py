"""Synthetic datasets with planted piecewise-linear structure.

Class embeddings are random unit vectors; each image is generated from one of
K_star hidden linear maps applied to its class embedding, plus isotropic
Gaussian noise. The map is assigned per image (not per class), so a
single-matrix model is genuinely handicapped. The residual oracle knows the
generating maps and serves as an upper-reference classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassSet, ImageSet, ZeroShotSplit
from .errors import ValidationError
from .evaluation import per_class_top1
from .fileio import atomic_write_text


@dataclass(frozen=True)
class PlantedSpec:
    k_star: int
    d_x: int
    d_y: int
    n_train_classes: int
    n_test_classes: int
    images_per_class: int
    noise_sigma: float
    seed: int

    def __post_init__(self) -> None:
        counts = {
            "k_star": self.k_star,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "n_train_classes": self.n_train_classes,
            "n_test_classes": self.n_test_classes,
            "images_per_class": self.images_per_class,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValidationError(f"{name} must be >=1, got {value}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValidationError(f"noise_sigma must be >=0, got {self.noise_sigma}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True, eq=False)
class PlantedTruth:
    """Generating maps and the per-image map assignment, aligned with the
    generated image order (``image_ids`` carries the alignment)."""

    maps: np.ndarray
    assignment: np.ndarray
    image_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        maps = np.array(self.maps, dtype=np.float64, order="C")
        maps.setflags(write=False)
        assignment = np.array(self.assignment, dtype=np.intp)
        assignment.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        if maps.ndim != 3:
            raise ValidationError("maps must have shape (K_star, d_x, d_y)")
        k_star = maps.shape[0]
        if assignment.size and not (
            (assignment >= 0).all() and (assignment < k_star).all()
        ):
            raise ValidationError(f"assignment values must lie in [0, {k_star})")
        if len(self.image_ids) != assignment.shape[0]:
            raise ValidationError("image_ids and assignment lengths differ")


def _val_carve(n_train_pool: int) -> int:
    # one fifth of the train pool (at least 1) is held out as val classes
    if n_train_pool < 2:
        return 0
    return min(n_train_pool - 1, max(1, n_train_pool // 5))


def generate_planted(
    spec: PlantedSpec,
) -> tuple[ImageSet, ClassSet, ZeroShotSplit, PlantedTruth]:
    """Deterministically generate a planted dataset from the spec seed.

    Each image of class c is x = A_g @ y_c + sigma * eps with g drawn
    uniformly per image. The noise directions are drawn even when sigma is 0
    so datasets differing only in sigma share classes, maps and assignments.
    """
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_train_classes + spec.n_test_classes
    width = max(3, len(str(n_classes - 1)))
    class_ids = tuple(f"c{i:0{width}d}" for i in range(n_classes))
    raw = rng.normal(size=(n_classes, spec.d_y))
    norms = np.linalg.norm(raw, axis=1)
    if (norms == 0.0).any():
        raise ValidationError("degenerate zero class embedding drawn")
    emb = raw / norms[:, None]
    maps = rng.normal(size=(spec.k_star, spec.d_x, spec.d_y))

    n_images = n_classes * spec.images_per_class
    class_idx = np.repeat(np.arange(n_classes), spec.images_per_class)
    assignment = rng.integers(spec.k_star, size=n_images)
    eps = rng.standard_normal((n_images, spec.d_x))
    protos = np.einsum("kxy,cy->kcx", maps, emb)  # (K_star, C, d_x)
    features = protos[assignment, class_idx] + spec.noise_sigma * eps

    img_width = max(5, len(str(n_images - 1)))
    image_ids = tuple(f"img{i:0{img_width}d}" for i in range(n_images))
    labels = tuple(class_ids[c] for c in class_idx)
    images = ImageSet(image_ids, labels, features)
    classes = ClassSet(class_ids, emb, "planted")

    pool = list(class_ids[: spec.n_train_classes])
    n_val = _val_carve(spec.n_train_classes)
    split = ZeroShotSplit(
        frozenset(pool[: len(pool) - n_val]),
        frozenset(pool[len(pool) - n_val :]),
        frozenset(class_ids[spec.n_train_classes :]),
    )
    truth = PlantedTruth(maps, assignment, image_ids)
    return images, classes, split, truth


def oracle_accuracy(
    truth: PlantedTruth, test_images: ImageSet, test_classes: ClassSet
) -> float:
    """Per-class top-1 of the nearest-generator classifier.

    Each image is assigned the class c minimizing min_g ||x - A_g @ y_c||;
    this knows the generating maps, so trained models should not beat it on
    average. Operates on raw (un-z-scored) features.
    """
    k_star, d_x, d_y = truth.maps.shape
    if test_images.d_x != d_x or test_classes.d_y != d_y:
        raise ValidationError(
            "mismatched data: truth maps do not fit the supplied images/classes"
        )
    protos = np.einsum("kxy,cy->kcx", truth.maps, test_classes.embeddings)
    flat = protos.reshape(k_star * test_classes.n, d_x)
    x = test_images.features
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ flat.T)
        + (flat * flat).sum(axis=1)[None, :]
    ).reshape(test_images.n, k_star, test_classes.n)
    best_class = d2.min(axis=1).argmin(axis=1)
    preds = [test_classes.class_ids[c] for c in best_class]
    return per_class_top1(preds, test_images.labels, test_classes.class_ids)


def write_truth_csv(truth: PlantedTruth, path) -> None:
    lines = [
        f"{image_id},{int(g)}"
        for image_id, g in zip(truth.image_ids, truth.assignment)
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")
