"""Embedding dataset containers: parsing, validation, normalization, splits, fusion.

File formats (UTF-8 text, comma-separated, ``.``-decimal, no header):

* image features -- one row per image: ``image_id,class_id,v1,...,v_dx``
* class embeddings -- one row per class: ``class_id,v1,...,v_dy``
* split -- sections ``[train]``, ``[val]``, ``[test]``, one class id per line
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

# Lower bound applied to z-score standard deviations (constant columns).
EPSILON_FLOOR = 1e-8


def _as_float_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


def _as_float_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a 1-D vector, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageSet:
    """Image feature matrix with per-image class labels and opaque string ids.

    Immutable after construction; ``features`` is an (N, d_x) float64 matrix
    with the underlying buffer marked read-only.
    """

    ids: tuple[str, ...]
    labels: tuple[str, ...]
    features: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "labels", tuple(self.labels))
        feats = _as_float_matrix(self.features, "features")
        object.__setattr__(self, "features", feats)
        if not (len(self.ids) == len(self.labels) == feats.shape[0]):
            raise ValidationError(
                f"row count mismatch: {len(self.ids)} ids, {len(self.labels)} labels, "
                f"{feats.shape[0]} feature rows"
            )
        if not np.isfinite(feats).all():
            raise ValidationError("image features contain NaN/Inf entries")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d_x(self) -> int:
        return int(self.features.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.labels == other.labels
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ClassSet:
    """Class embedding matrix keyed by unique class ids, in file order.

    Equality compares ids and embeddings only; ``source_tag`` is a free-form
    annotation (e.g. which embedding family) that file formats do not carry.
    """

    class_ids: tuple[str, ...]
    embeddings: np.ndarray
    source_tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        emb = _as_float_matrix(self.embeddings, "embeddings")
        object.__setattr__(self, "embeddings", emb)
        if len(self.class_ids) != emb.shape[0]:
            raise ValidationError(
                f"row count mismatch: {len(self.class_ids)} class ids, "
                f"{emb.shape[0]} embedding rows"
            )
        seen = set()
        for cid in self.class_ids:
            if cid in seen:
                raise ValidationError(f"duplicate class id '{cid}'")
            seen.add(cid)
        if not np.isfinite(emb).all():
            raise ValidationError("class embeddings contain NaN/Inf entries")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {cid: i for i, cid in enumerate(self.class_ids)}

    @property
    def n(self) -> int:
        return len(self.class_ids)

    @property
    def d_y(self) -> int:
        return int(self.embeddings.shape[1])

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._index

    def index_of(self, class_id: str) -> int:
        try:
            return self._index[class_id]
        except KeyError:
            raise ValidationError(f"unknown class id '{class_id}'") from None

    def vector(self, class_id: str) -> np.ndarray:
        return self.embeddings[self.index_of(class_id)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassSet):
            return NotImplemented
        return self.class_ids == other.class_ids and np.array_equal(
            self.embeddings, other.embeddings
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ZeroShotSplit:
    """Three pairwise-disjoint class-id sets. A set may be empty as long as it
    is not used for its role (parsers enforce non-empty train/test)."""

    train_classes: frozenset[str]
    val_classes: frozenset[str]
    test_classes: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_classes", frozenset(self.train_classes))
        object.__setattr__(self, "val_classes", frozenset(self.val_classes))
        object.__setattr__(self, "test_classes", frozenset(self.test_classes))
        pairs = [
            ("train", "val", self.train_classes & self.val_classes),
            ("train", "test", self.train_classes & self.test_classes),
            ("val", "test", self.val_classes & self.test_classes),
        ]
        for a, b, overlap in pairs:
            if overlap:
                raise ValidationError(
                    f"overlapping partitions: {sorted(overlap)} in both [{a}] and [{b}]"
                )


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension z-score statistics; ``std`` is strictly positive."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = _as_float_vector(self.mean, "mean")
        std = _as_float_vector(self.std, "std")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape:
            raise ValidationError("mean and std must have the same length")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise ValidationError("normalization stats contain NaN/Inf")
        if not (std > 0).all():
            raise ValidationError("std entries must be strictly positive")

    @property
    def d_x(self) -> int:
        return int(self.mean.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    __hash__ = None  # type: ignore[assignment]


def _iter_lines(source) -> Iterable[str]:
    if isinstance(source, str):
        return source.splitlines()
    return (line.rstrip("\n") for line in source)


def _parse_floats(tokens: Sequence[str], lineno: int) -> list[float]:
    values = []
    for tok in tokens:
        try:
            v = float(tok)
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric value '{tok.strip()}'") from None
        if not np.isfinite(v):
            raise FormatError(f"line {lineno}: non-finite value '{tok.strip()}'")
        values.append(v)
    return values


def parse_image_features(source) -> ImageSet:
    """Parse the image-features format from a string or line iterable.

    Dimensionality is inferred from the first row and enforced on all rows.
    """
    ids: list[str] = []
    labels: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    d_x = None
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise FormatError(
                f"line {lineno}: expected 'image_id,class_id,v1,...', got {len(parts)} fields"
            )
        image_id, class_id = parts[0], parts[1]
        if image_id in seen:
            raise ValidationError(f"duplicate image id '{image_id}'")
        seen.add(image_id)
        values = _parse_floats(parts[2:], lineno)
        if d_x is None:
            d_x = len(values)
        elif len(values) != d_x:
            raise FormatError(
                f"line {lineno}: ragged row, expected {d_x} values, got {len(values)}"
            )
        ids.append(image_id)
        labels.append(class_id)
        rows.append(values)
    if not rows:
        raise FormatError("no rows in image features input")
    return ImageSet(tuple(ids), tuple(labels), np.array(rows, dtype=np.float64))


def parse_class_embeddings(source, source_tag: str = "") -> ClassSet:
    """Parse the class-embeddings format; rows are kept raw (not normalized)."""
    class_ids: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    d_y = None
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise FormatError(
                f"line {lineno}: expected 'class_id,v1,...', got {len(parts)} fields"
            )
        class_id = parts[0]
        if class_id in seen:
            raise ValidationError(f"duplicate class id '{class_id}'")
        seen.add(class_id)
        values = _parse_floats(parts[1:], lineno)
        if d_y is None:
            d_y = len(values)
        elif len(values) != d_y:
            raise FormatError(
                f"line {lineno}: ragged row, expected {d_y} values, got {len(values)}"
            )
        class_ids.append(class_id)
        rows.append(values)
    if not rows:
        raise FormatError("no rows in class embeddings input")
    return ClassSet(tuple(class_ids), np.array(rows, dtype=np.float64), source_tag)


_SPLIT_SECTIONS = ("train", "val", "test")


def parse_split(source) -> ZeroShotSplit:
    """Parse the split format; train and test partitions must be non-empty."""
    sections: dict[str, set[str]] = {name: set() for name in _SPLIT_SECTIONS}
    current = None
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in sections:
                raise FormatError(f"line {lineno}: unknown section '[{name}]'")
            current = name
            continue
        if current is None:
            raise FormatError(f"line {lineno}: class id before any section header")
        sections[current].add(line)
    if not sections["train"]:
        raise ValidationError("empty train partition")
    if not sections["test"]:
        raise ValidationError("empty test partition")
    return ZeroShotSplit(
        frozenset(sections["train"]), frozenset(sections["val"]), frozenset(sections["test"])
    )


def _fmt(v: float) -> str:
    # repr of a python float is the shortest round-tripping decimal form
    return repr(float(v))


def serialize_image_features(images: ImageSet) -> str:
    lines = [
        ",".join([images.ids[i], images.labels[i], *(_fmt(v) for v in images.features[i])])
        for i in range(images.n)
    ]
    return "\n".join(lines) + "\n"


def serialize_class_embeddings(classes: ClassSet) -> str:
    lines = [
        ",".join([classes.class_ids[i], *(_fmt(v) for v in classes.embeddings[i])])
        for i in range(classes.n)
    ]
    return "\n".join(lines) + "\n"


def serialize_split(split: ZeroShotSplit) -> str:
    out = []
    for name, ids in (
        ("train", split.train_classes),
        ("val", split.val_classes),
        ("test", split.test_classes),
    ):
        out.append(f"[{name}]")
        out.extend(sorted(ids))
    return "\n".join(out) + "\n"


def fit_zscore(images: ImageSet, train_classes: Iterable[str]) -> NormStats:
    """Per-dimension mean/std over images whose label is in ``train_classes``.

    Uses the population convention (divide by N); stds are floored at
    ``EPSILON_FLOOR`` so constant columns stay finite after scaling.
    """
    wanted = set(train_classes)
    mask = np.array([lab in wanted for lab in images.labels], dtype=bool)
    x = images.features[mask]
    if x.shape[0] < 2:
        raise ValidationError(
            f"need at least 2 training-class images to fit z-score stats, got {x.shape[0]}"
        )
    mean = x.mean(axis=0)
    std = np.sqrt(x.var(axis=0))
    std = np.maximum(std, EPSILON_FLOOR)
    return NormStats(mean, std)


def apply_zscore(images: ImageSet, stats: NormStats) -> ImageSet:
    """Return a new ImageSet with features shifted/scaled by train-fitted stats."""
    if images.d_x != stats.d_x:
        raise ValidationError(
            f"dimension mismatch: features have d_x={images.d_x}, stats have d_x={stats.d_x}"
        )
    return ImageSet(images.ids, images.labels, (images.features - stats.mean) / stats.std)


def l2_normalize_classes(classes: ClassSet) -> ClassSet:
    """Divide each class embedding row by its Euclidean norm."""
    norms = np.linalg.norm(classes.embeddings, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(
            f"zero embedding for class '{classes.class_ids[int(zero[0])]}'"
        )
    return ClassSet(classes.class_ids, classes.embeddings / norms[:, None], classes.source_tag)


def make_random_splits(
    classes: ClassSet,
    counts: tuple[int, int, int],
    seed: int,
    n_splits: int,
) -> list[ZeroShotSplit]:
    """Draw ``n_splits`` zero-shot splits by seeded shuffles of the class ids."""
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise ValidationError("split counts must be non-negative")
    if n_train + n_val + n_test > classes.n:
        raise ValidationError(
            f"split counts {counts} exceed the {classes.n} available classes"
        )
    if n_splits < 1:
        raise ValidationError("n_splits must be >= 1")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        order = rng.permutation(classes.n)
        shuffled = [classes.class_ids[i] for i in order]
        splits.append(
            ZeroShotSplit(
                frozenset(shuffled[:n_train]),
                frozenset(shuffled[n_train : n_train + n_val]),
                frozenset(shuffled[n_train + n_val : n_train + n_val + n_test]),
            )
        )
    return splits


def fuse_early(classsets: Sequence[ClassSet]) -> ClassSet:
    """Concatenate per-class embeddings from several sources, in input order.

    Sources must cover identical class-id sets and are expected to be
    individually l2-normalized already; the concatenation is NOT renormalized,
    so each source contributes bounded energy.
    """
    if not classsets:
        raise ValidationError("fuse_early requires at least one class set")
    base = classsets[0]
    base_ids = set(base.class_ids)
    blocks = [base.embeddings]
    for cs in classsets[1:]:
        if set(cs.class_ids) != base_ids:
            missing = sorted(base_ids ^ set(cs.class_ids))
            raise ValidationError(f"class-id sets differ between sources: {missing}")
        order = [cs.index_of(cid) for cid in base.class_ids]
        blocks.append(cs.embeddings[order])
    tag = "+".join(cs.source_tag for cs in classsets if cs.source_tag)
    return ClassSet(base.class_ids, np.hstack(blocks), tag)


def subset_images(images: ImageSet, class_ids: Iterable[str]) -> ImageSet:
    """Images whose label is in ``class_ids``, preserving original order."""
    wanted = set(class_ids)
    keep = [i for i, lab in enumerate(images.labels) if lab in wanted]
    return ImageSet(
        tuple(images.ids[i] for i in keep),
        tuple(images.labels[i] for i in keep),
        images.features[keep] if keep else np.zeros((0, images.d_x)),
    )


def subset_classes(classes: ClassSet, class_ids: Iterable[str]) -> ClassSet:
    """Classes restricted to ``class_ids``, preserving file order."""
    wanted = set(class_ids)
    unknown = wanted - set(classes.class_ids)
    if unknown:
        raise ValidationError(f"unknown class ids: {sorted(unknown)}")
    keep = [i for i, cid in enumerate(classes.class_ids) if cid in wanted]
    return ClassSet(
        tuple(classes.class_ids[i] for i in keep),
        classes.embeddings[keep],
        classes.source_tag,
    )


def check_labels_known(images: ImageSet, classes: ClassSet) -> None:
    """Raise if any image label is missing from the companion class set."""
    for lab in images.labels:
        if lab not in classes:
            raise ValidationError(f"image label '{lab}' not present in class set")
