"""Seeded long-tailed Gaussian-mixture datasets and their JSON-lines file format.

File layout (one JSON object per line)::

    {"meta": {"dim": 8, "classes": 10}}
    {"label": 0, "x": [0.12345678901234567, ...]}
    {"label": 3, "x": [...], "dbg": true}

Floats are written with 17 significant digits so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from blab.errors import InvalidArgument, InvariantViolation, ParseError, PlacementFailure

PLACEMENT_RETRIES = 1000


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    # True on rows produced by a generator; None means all rows are real.
    generated: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise InvariantViolation(f"features must be a matrix, got shape {features.shape}")
        if labels.ndim != 1 or len(labels) != features.shape[0]:
            raise InvariantViolation(
                f"label count {labels.shape} does not match feature rows {features.shape[0]}"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InvariantViolation("labels must be integers")
        labels = labels.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            bad = int(labels[(labels < 0) | (labels >= self.num_classes)][0])
            raise InvariantViolation(f"label {bad} outside [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0, 0])
            raise InvariantViolation(f"non-finite value in row {row}")
        counts = np.bincount(labels, minlength=self.num_classes)
        if np.any(counts < 1):
            missing = [int(c) for c in np.flatnonzero(counts < 1)]
            raise InvariantViolation(f"classes without samples: {missing}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.generated is not None:
            generated = np.asarray(self.generated, dtype=bool)
            if generated.shape != labels.shape:
                raise InvariantViolation("generated flags must align with labels")
            object.__setattr__(self, "generated", generated)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def priors(self) -> np.ndarray:
        counts = self.class_counts.astype(float)
        return counts / counts.sum()

    def class_features(self, c: int) -> np.ndarray:
        return self.features[self.labels == c]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class MixtureSpec:
    """Ground-truth isotropic Gaussian per class."""

    means: np.ndarray
    scale: float
    priors: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        priors = np.asarray(self.priors, dtype=float)
        if means.ndim != 2:
            raise InvariantViolation("means must be a C x d matrix")
        if not np.all(np.isfinite(means)):
            raise InvariantViolation("means must be finite")
        if not self.scale > 0:
            raise InvariantViolation(f"scale must be positive, got {self.scale}")
        if priors.shape != (means.shape[0],) or np.any(priors < 0):
            raise InvariantViolation("priors must be one nonnegative weight per class")
        if abs(priors.sum() - 1.0) > 1e-9:
            raise InvariantViolation(f"priors sum to {priors.sum()}, not 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def with_priors(self, priors) -> MixtureSpec:
        return MixtureSpec(self.means, self.scale, priors)

    def to_dict(self) -> dict:
        return {
            "means": [[_fmt(v) for v in row] for row in self.means],
            "scale": _fmt(self.scale),
            "priors": [_fmt(v) for v in self.priors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MixtureSpec:
        return cls(
            np.array(d["means"], dtype=float), float(d["scale"]), np.array(d["priors"], dtype=float)
        )


@dataclass(frozen=True)
class GroupSplit:
    head: frozenset
    med: frozenset
    tail: frozenset

    def group_of(self, c: int) -> str:
        for name in ("head", "med", "tail"):
            if c in getattr(self, name):
                return name
        raise KeyError(c)

    def items(self):
        return (("head", self.head), ("med", self.med), ("tail", self.tail))


def longtail_counts(num_classes: int, n_max: int, ratio: float) -> np.ndarray:
    """Exponential profile ``n_c = round(n_max * ratio**(-c / (C - 1)))``, clamped to >= 1."""
    c = np.arange(num_classes)
    counts = np.round(n_max * float(ratio) ** (-c / (num_classes - 1))).astype(np.int64)
    return np.maximum(counts, 1)


def place_means(num_classes, dim, sep, scale, rng, retries=PLACEMENT_RETRIES):
    """Draw class means from N(0, (sep*scale)^2 I), rejecting any candidate
    closer than ``sep * scale`` to an already-placed mean."""
    spread = sep * scale
    min_dist = sep * scale
    means = np.empty((num_classes, dim))
    for c in range(num_classes):
        for _ in range(retries):
            cand = rng.normal(0.0, spread, size=dim)
            if c == 0 or np.min(np.linalg.norm(means[:c] - cand, axis=1)) >= min_dist:
                means[c] = cand
                break
        else:
            raise PlacementFailure(
                f"could not place mean {c} at separation {min_dist} within {retries} retries"
            )
    return means


def sample_mixture(spec: MixtureSpec, counts, rng) -> LabeledDataset:
    """Draw ``counts[c]`` samples of every class, rows grouped by class."""
    counts = np.asarray(counts, dtype=np.int64)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    noise = rng.standard_normal((labels.size, spec.dim))
    features = spec.means[labels] + spec.scale * noise
    return LabeledDataset(features, labels, spec.num_classes)


def make_longtail_mixture(
    num_classes: int,
    dim: int,
    n_max: int,
    ratio: float,
    sep: float,
    scale: float,
    seed: int,
) -> tuple[LabeledDataset, MixtureSpec]:
    """Build a long-tailed training set and the mixture it was drawn from.

    Class ``c`` gets ``round(n_max * ratio**(-c/(C-1)))`` samples; the returned
    spec carries the empirical class priors.
    """
    if num_classes < 2:
        raise InvalidArgument(f"need at least 2 classes, got {num_classes}")
    if dim < 1:
        raise InvalidArgument(f"dimension must be >= 1, got {dim}")
    if n_max < num_classes:
        raise InvalidArgument(f"n_max={n_max} must be >= number of classes {num_classes}")
    if not ratio >= 1:
        raise InvalidArgument(f"imbalance ratio must be >= 1, got {ratio}")
    if not scale > 0:
        raise InvalidArgument(f"scale must be positive, got {scale}")
    if not sep >= 0:
        raise InvalidArgument(f"separation must be nonnegative, got {sep}")

    counts = longtail_counts(num_classes, n_max, ratio)
    means = place_means(num_classes, dim, sep, scale, np.random.default_rng([seed, 0]))
    spec = MixtureSpec(means, scale, counts / counts.sum())
    dataset = sample_mixture(spec, counts, np.random.default_rng([seed, 1]))
    return dataset, spec


def split_groups(dataset: LabeledDataset | np.ndarray) -> GroupSplit:
    """Split classes into head/med/tail thirds by descending count.

    Ties are broken by class index; leftover classes go to the earlier groups
    (10 classes split 4/3/3).  Accepts a dataset or a bare count vector.
    """
    counts = dataset.class_counts if isinstance(dataset, LabeledDataset) else np.asarray(dataset)
    C = len(counts)
    if C < 3:
        raise InvalidArgument(f"group split needs at least 3 classes, got {C}")
    order = sorted(range(C), key=lambda c: (-int(counts[c]), c))
    base, rem = divmod(C, 3)
    sizes = [base + (1 if g < rem else 0) for g in range(3)]
    head = frozenset(order[: sizes[0]])
    med = frozenset(order[sizes[0] : sizes[0] + sizes[1]])
    tail = frozenset(order[sizes[0] + sizes[1] :])
    return GroupSplit(head, med, tail)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _row(label, x, extra=None) -> str:
    body = f'{{"label": {int(label)}, "x": [{", ".join(_fmt(v) for v in x)}]'
    if extra:
        for key, value in extra.items():
            body += f", {json.dumps(key)}: {json.dumps(value, sort_keys=True)}"
    return body + "}"


def dataset_lines(dataset: LabeledDataset, row_meta=None):
    """Yield the file lines for ``dataset``; ``row_meta(i)`` may add fields to row ``i``."""
    yield json.dumps({"meta": {"dim": dataset.dim, "classes": dataset.num_classes}})
    for i, (label, x) in enumerate(zip(dataset.labels, dataset.features)):
        extra = {}
        if dataset.generated is not None and dataset.generated[i]:
            extra["dbg"] = True
        if row_meta is not None:
            extra.update(row_meta(i) or {})
        yield _row(label, x, extra)


def save_dataset(dataset: LabeledDataset, path, row_meta=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset_lines(dataset, row_meta):
            fh.write(line + "\n")


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, expected a meta header", line=1)
    try:
        header = json.loads(lines[0])
        dim = int(header["meta"]["dim"])
        classes = int(header["meta"]["classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad meta header: {exc}", line=1) from None

    labels, rows, generated = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            label = rec["label"]
            x = rec["x"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed record: {exc}", line=lineno) from None
        if not isinstance(label, int) or isinstance(label, bool):
            raise ParseError(f"label must be an integer, got {label!r}", line=lineno)
        if not isinstance(x, list) or len(x) != dim:
            raise ParseError(f"expected {dim} features", line=lineno)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x):
            raise ParseError("features must be numbers", line=lineno)
        labels.append(label)
        rows.append(x)
        generated.append(bool(rec.get("dbg", False)))

    features = np.array(rows, dtype=float).reshape(len(rows), dim)
    return LabeledDataset(
        features,
        np.array(labels, dtype=np.int64),
        classes,
        generated=np.array(generated) if any(generated) else None,
    )


def augment(base: LabeledDataset, features, labels) -> LabeledDataset:
    """Append generated rows (flagged ``dbg``) to ``base``."""
    features = np.asarray(features, dtype=float).reshape(-1, base.dim)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    flags = base.generated if base.generated is not None else np.zeros(base.n, dtype=bool)
    return LabeledDataset(
        np.vstack([base.features, features]),
        np.concatenate([base.labels, labels]),
        base.num_classes,
        generated=np.concatenate([flags, np.ones(labels.size, dtype=bool)]),
    )
