"""Boundary-ambiguity metrics: inter-class overlap, outlier sample rate, generation confidence."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from blab.data import GroupSplit
from blab.diffusion import MODIFIED, STANDARD, GuidanceConfig, sample
from blab.errors import InsufficientSamples, InvalidArgument, ZeroFeatureVector
from blab.vmf import VmfModel, fit_vmf, overlap_degree, overlap_degree_pooled

LAMBDAS = (2.5, 2.625, 2.75, 2.875, 3.0)
GROUP_NAMES = ("head", "med", "tail")


def worker_count() -> int:
    """Thread cap from ``BLAB_THREADS``, defaulting to the machine's CPU count."""
    env = os.environ.get("BLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidArgument(f"BLAB_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def l2_normalize_rows(features) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=float))
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        row = int(np.flatnonzero(norms[:, 0] < 1e-12)[0])
        raise ZeroFeatureVector(f"row {row} has zero norm")
    return features / norms


# ---------------------------------------------------------------------------
# Inter-class overlap
# ---------------------------------------------------------------------------


@dataclass
class OverlapMatrix:
    values: np.ndarray
    mc_samples: int
    seed: int
    models: list = field(default_factory=list, repr=False)
    dropped_rows: int = 0

    def off_diagonal_mean(self) -> float:
        C = self.values.shape[0]
        mask = ~np.eye(C, dtype=bool)
        return float(self.values[mask].mean())

    def to_rows(self):
        C = self.values.shape[0]
        yield ["class"] + [str(c) for c in range(C)]
        for a in range(C):
            yield [str(a)] + [format(float(v), ".17g") for v in self.values[a]]


def pair_seed(seed: int, a: int, b: int) -> list:
    return [int(seed), min(a, b), max(a, b)]


def overlap_matrix(
    features,
    labels,
    clf=None,
    m: int = 20000,
    seed: int = 0,
    num_classes: int | None = None,
    estimator: str = "importance",
) -> OverlapMatrix:
    """Fit one vMF per class on unit features and fill every pair with the log-BC estimate.

    With a classifier, ``features`` are raw inputs mapped through its
    normalized feature map; rows whose features vanish are dropped and
    counted in ``dropped_rows``.  ``estimator="pooled"`` averages
    ``sqrt(p_a p_b)`` over the two classes' own points instead of importance
    sampling.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if estimator not in ("importance", "pooled"):
        raise InvalidArgument(f"unknown overlap estimator {estimator!r}")
    dropped = 0
    if clf is not None:
        phi = clf.features(features)
        keep = np.linalg.norm(phi, axis=1) >= 1e-12
        dropped = int((~keep).sum())
        unit = l2_normalize_rows(phi[keep])
        labels = labels[keep]
    else:
        unit = l2_normalize_rows(features)
    C = num_classes if num_classes is not None else int(labels.max()) + 1

    models = []
    for c in range(C):
        members = unit[labels == c]
        if members.shape[0] < 2:
            raise InsufficientSamples(f"class {c} has {members.shape[0]} samples; need 2")
        models.append(fit_vmf(members))

    pairs = [(a, b) for a in range(C) for b in range(a, C)]

    def work(pair):
        a, b = pair
        if estimator == "pooled":
            pts = unit[(labels == a) | (labels == b)]
            return overlap_degree_pooled(models[a], models[b], pts)
        return overlap_degree(models[a], models[b], m, pair_seed(seed, a, b))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(work, pairs))
    values = np.empty((C, C))
    for (a, b), v in zip(pairs, results):
        values[a, b] = values[b, a] = v
    return OverlapMatrix(values, m, seed, models, dropped)


# ---------------------------------------------------------------------------
# Outlier sample rate
# ---------------------------------------------------------------------------


def nearest_neighbor_distances(points) -> np.ndarray:
    """Euclidean distance from every row to its nearest other row."""
    points = np.asarray(points, dtype=float)
    sq = (points**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    return np.sqrt(np.clip(d2.min(axis=1), 0.0, None))


def outlier_flags(distances, lam: float) -> np.ndarray:
    """``|d_i - mean| / std > lam``; a zero spread flags nothing."""
    distances = np.asarray(distances, dtype=float)
    spread = distances.std()
    if spread == 0.0:
        return np.zeros(distances.shape, dtype=bool)
    return np.abs(distances - distances.mean()) / spread > lam


@dataclass
class ClassOutliers:
    cls: int
    mean_distance: float
    std_distance: float
    rates: dict  # lambda -> eta
    flags: dict  # lambda -> bool array over the class's rows

    @property
    def mean_rate(self) -> float:
        return float(np.mean(list(self.rates.values())))


@dataclass
class OutlierReport:
    lambdas: tuple
    classes: dict  # class id -> ClassOutliers
    skipped: list
    groups: dict  # group name -> mean sweep-averaged rate, plus "overall"

    def rows(self):
        yield ["class", "lambda", "mean_nn_distance", "std_nn_distance", "outlier_rate"]
        for c in sorted(self.classes):
            rec = self.classes[c]
            for lam in self.lambdas:
                yield [
                    str(c),
                    format(float(lam), ".17g"),
                    format(float(rec.mean_distance), ".17g"),
                    format(float(rec.std_distance), ".17g"),
                    format(float(rec.rates[lam]), ".17g"),
                ]


def outlier_rate(features, labels, lambdas=LAMBDAS, groups: GroupSplit | None = None) -> OutlierReport:
    """Per-class share of samples whose standardized nearest-neighbour distance exceeds lambda.

    Classes with fewer than 3 samples are skipped and listed in ``skipped``.
    Group values average the sweep-mean rate over the group's evaluated
    classes; ``overall`` averages over all evaluated classes.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    lambdas = tuple(float(v) for v in lambdas)
    classes, skipped = {}, []
    for c in np.unique(labels):
        pts = features[labels == c]
        if pts.shape[0] < 3:
            skipped.append(int(c))
            continue
        dist = nearest_neighbor_distances(pts)
        flags = {lam: outlier_flags(dist, lam) for lam in lambdas}
        classes[int(c)] = ClassOutliers(
            int(c),
            float(dist.mean()),
            float(dist.std()),
            {lam: float(f.mean()) for lam, f in flags.items()},
            flags,
        )

    summary = {}
    if classes:
        summary["overall"] = float(np.mean([r.mean_rate for r in classes.values()]))
    if groups is not None:
        for name, members in groups.items():
            vals = [classes[c].mean_rate for c in sorted(members) if c in classes]
            summary[name] = float(np.mean(vals)) if vals else float("nan")
    return OutlierReport(lambdas, classes, skipped, summary)


# ---------------------------------------------------------------------------
# Generation confidence
# ---------------------------------------------------------------------------


@dataclass
class GeneratedBatch:
    mode: str
    scale: float
    target: int
    disturb: int | None
    samples: np.ndarray


@dataclass
class ConfidenceReport:
    # (group, mode, scale) -> (mean_conf, mean_cred, count)
    entries: dict

    def mean_conf(self, group, mode, scale) -> float:
        return self.entries[(group, mode, float(scale))][0]

    def mean_cred(self, group, mode, scale) -> float:
        return self.entries[(group, mode, float(scale))][1]

    def rows(self):
        yield ["group", "mode", "s", "mean_conf", "mean_cred"]
        order = {name: i for i, name in enumerate(GROUP_NAMES + ("all",))}
        for key in sorted(self.entries, key=lambda k: (order.get(k[0], 99), k[1], k[2])):
            conf, cred, _ = self.entries[key]
            yield [key[0], key[1], format(float(key[2]), ".17g"), format(float(conf), ".17g"), format(float(cred), ".17g")]


def generation_confidence(clf, batches, groups: GroupSplit) -> ConfidenceReport:
    """Mean Conf (raw target logit) and Cred per (group, mode, scale).

    Standard-mode batches measure credibility against the runner-up class;
    modified-mode batches against their disturbing class.  An ``all`` group
    pools every target.
    """
    pooled: dict = {}
    for batch in batches:
        x = np.atleast_2d(batch.samples)
        conf = clf.confidence(x, batch.target)
        disturb = batch.disturb if batch.mode == MODIFIED else None
        cred = clf.credibility(x, disturb)
        for group in (groups.group_of(batch.target), "all"):
            acc = pooled.setdefault((group, batch.mode, float(batch.scale)), ([], []))
            acc[0].append(conf)
            acc[1].append(cred)
    if not pooled:
        raise InvalidArgument("no generated samples to score")
    entries = {}
    for key, (confs, creds) in pooled.items():
        conf = np.concatenate(confs)
        cred = np.concatenate(creds)
        if conf.size == 0:
            raise InvalidArgument(f"empty generated group {key}")
        entries[key] = (float(conf.mean()), float(cred.mean()), int(conf.size))
    return ConfidenceReport(entries)


def nearest_head_disturber(means, groups: GroupSplit) -> dict:
    """For every class, the closest head class (by mean distance) other than itself."""
    means = np.asarray(means, dtype=float)
    head = sorted(groups.head)
    out = {}
    for c in range(means.shape[0]):
        options = [h for h in head if h != c]
        dist = [np.linalg.norm(means[h] - means[c]) for h in options]
        out[c] = options[int(np.argmin(dist))]
    return out


def generate_confidence_batches(model, schedule, targets, disturbers, scales, n_per_class, seed):
    """Standard and modified CFG draws for every target class and scale.

    Each (mode, scale, target) batch uses its own seed stream.
    """
    batches = []
    for si, s in enumerate(scales):
        for c in targets:
            for mi, mode in enumerate((STANDARD, MODIFIED)):
                disturb = disturbers[c] if mode == MODIFIED else None
                guidance = GuidanceConfig(float(s), int(c), mode, disturb)
                x = sample(model, schedule, guidance, [int(seed), si, int(c), mi], n=n_per_class)
                batches.append(GeneratedBatch(mode, float(s), int(c), disturb, x))
    return batches


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow(row)
