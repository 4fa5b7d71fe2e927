"""Boundary-aware generation and the two-branch filter that cleans its output.

A source sample is noised to the middle of the schedule, pushed further
along its own class's predicted noise for a few steps, then denoised with
classifier-free guidance toward the most confusable other class.  Each
candidate is kept only if it lies inside the target class's prototype
distance shell and is not confidently assigned to some unrelated class.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from blab.classifier import Classifier
from blab.data import LabeledDataset, augment
from blab.diffusion import (
    GmmScoreModel,
    NoiseSchedule,
    cfg_combine,
    predict_noise,
    reverse,
)
from blab.errors import InvalidArgument, ZeroResultant

ACCEPTED = "accepted"
REJECTED_NEAR = "rejected_proto_near"
REJECTED_FAR = "rejected_proto_far"
REJECTED_CONFCRED = "rejected_confcred"
VERDICTS = (ACCEPTED, REJECTED_NEAR, REJECTED_FAR, REJECTED_CONFCRED)
PROTO_PASS = "pass"
OVERSAMPLE_CAP = 10
NOISING_RULES = ("inversion", "additive")


@dataclass
class DbgConfig:
    w: float = 3.0
    s: float = 0.75
    l: float = 0.02  # noqa: E741
    h: float = 0.05
    a_max: float = 0.9
    a_min: float = 0.5
    per_sample_count: int = 1
    seed: int = 0
    # Overrides the T/10 noising iterations.
    noise_steps: int | None = None
    # More candidates for smaller classes: n_max / n_c per source, capped at 10.
    tail_oversample: bool = False
    # "inversion" re-applies the closed-form forward step with the predicted noise;
    # "additive" uses the one-step transition, which grows the class residual every step.
    noising_rule: str = "inversion"

    def __post_init__(self):
        if not self.w >= 1:
            raise InvalidArgument(f"w must be >= 1, got {self.w}")
        if not (self.l >= 0 and self.h >= 0):
            raise InvalidArgument("l and h must be nonnegative")
        if not 0 <= self.a_min <= self.a_max <= 1:
            raise InvalidArgument("need 0 <= a_min <= a_max <= 1")
        if self.per_sample_count < 1:
            raise InvalidArgument("per_sample_count must be >= 1")
        if self.noise_steps is not None and self.noise_steps < 0:
            raise InvalidArgument("noise_steps must be nonnegative")
        if self.noising_rule not in NOISING_RULES:
            raise InvalidArgument(f"noising_rule must be one of {NOISING_RULES}")


@dataclass
class GenerationRecord:
    source_index: int
    candidate_index: int
    x_source: np.ndarray
    y_source: int
    y_target: int
    x_generated: np.ndarray
    proto_distance: float
    conf: float
    cred: float
    top_prob: float
    predicted_class: int
    verdict: str

    def to_dict(self) -> dict:
        out = asdict(self)
        out["x_source"] = [float(v) for v in self.x_source]
        out["x_generated"] = [float(v) for v in self.x_generated]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> GenerationRecord:
        d = dict(d)
        d["x_source"] = np.array(d["x_source"], dtype=float)
        d["x_generated"] = np.array(d["x_generated"], dtype=float)
        return cls(**d)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # C x H, unit rows
    d_low: np.ndarray
    d_high: np.ndarray
    counts: np.ndarray

    def bounds(self, c: int, l: float, h: float) -> tuple[float, float]:  # noqa: E741
        """Closed acceptance interval ``[(1-l) d_low, (1+h) d_high]`` for class ``c``."""
        lo = -math.inf if math.isinf(l) else (1.0 - l) * self.d_low[c]
        hi = math.inf if math.isinf(h) else (1.0 + h) * self.d_high[c]
        return lo, hi


def cosine_distance(unit, prototype) -> np.ndarray:
    return np.clip(1.0 - np.asarray(unit) @ prototype, 0.0, 2.0)


def build_prototypes(clf: Classifier, dataset: LabeledDataset) -> PrototypeBank:
    """Per class: re-normalized mean of unit features, and the min/max cosine
    distance of the class's own samples to it."""
    C = dataset.num_classes
    protos = np.empty((C, clf.width))
    d_low = np.empty(C)
    d_high = np.empty(C)
    for c in range(C):
        unit = clf.normalized_features(dataset.class_features(c))
        mean = unit.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ZeroResultant(f"class {c} features cancel; prototype undefined")
        protos[c] = mean / norm
        dist = cosine_distance(unit, protos[c])
        d_low[c], d_high[c] = dist.min(), dist.max()
    return PrototypeBank(protos, d_low, d_high, dataset.class_counts)


def confusable_k(num_classes: int, w: float) -> int:
    k = int(math.floor(num_classes / w))
    if k < 1:
        raise InvalidArgument(f"floor(C / w) = floor({num_classes} / {w}) is 0")
    return k


def select_target_label(clf: Classifier, x0, y0: int, num_classes: int, w: float) -> int:
    """Highest-logit member of the top-``k`` confusable classes, ``k = floor(C / w)``.

    ``k`` is capped at ``C - 1``, the number of classes other than ``y0``.
    """
    k = min(confusable_k(num_classes, w), num_classes - 1)
    return clf.topk_confusable(x0, k, label=y0)[0]


def select_target_labels(clf: Classifier, x0, y0, w: float) -> np.ndarray:
    """Batched ``select_target_label`` (argmax of the logits with the source class masked)."""
    confusable_k(clf.num_classes, w)
    logits = np.atleast_2d(clf.logits(x0)).copy()
    logits[np.arange(logits.shape[0]), np.asarray(y0)] = -np.inf
    return np.argmax(logits, axis=1)


def noising_window(schedule: NoiseSchedule, steps: int | None = None) -> tuple[int, int]:
    """Middle step ``m = T/2`` and the iteration count ``K`` (default ``T/10``)."""
    T = schedule.T
    if T % 10:
        raise InvalidArgument(f"T must be divisible by 10, got {T}")
    m = T // 2
    K = T // 10 if steps is None else int(steps)
    if m + K > T:
        raise InvalidArgument(f"noising would overflow the schedule: m + K = {m + K} > T = {T}")
    return m, K


def conditional_noising(
    model: GmmScoreModel,
    schedule: NoiseSchedule,
    x0,
    y_source,
    seed=None,
    *,
    eps=None,
    steps: int | None = None,
    rule: str = "inversion",
):
    """Noise ``x0`` to step ``m`` with random noise, then take ``K`` forward steps
    driven by the source-conditional noise prediction ``eps_c``.

    ``rule="inversion"`` re-applies the closed form with the predicted noise,
    ``x_{t+1} = sqrt(abar_{t+1}) x0_hat + sqrt(1 - abar_{t+1}) eps_c`` where
    ``x0_hat`` is the clean estimate at step ``t``.  ``rule="additive"`` takes
    ``x_{t+1} = sqrt(alpha_{t+1}) x_t + sqrt(1 - alpha_{t+1}) eps_c``.  Both keep
    a zero-noise point on the class mean fixed.  Returns ``(x, final_step)``.
    """
    if rule not in NOISING_RULES:
        raise InvalidArgument(f"rule must be one of {NOISING_RULES}, got {rule!r}")
    m, K = noising_window(schedule, steps)
    x0 = np.asarray(x0, dtype=float)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(x0.shape)
    abar = schedule.abar(m)
    x = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=float)
    for t in range(m, m + K):
        eps_c = predict_noise(model, x, y_source, t, schedule)
        if rule == "inversion":
            abar_t, abar_next = schedule.abar(t), schedule.abar(t + 1)
            x0_hat = (x - np.sqrt(1.0 - abar_t) * eps_c) / np.sqrt(abar_t)
            x = np.sqrt(abar_next) * x0_hat + np.sqrt(1.0 - abar_next) * eps_c
        else:
            alpha = schedule.alpha_at(t + 1)
            x = np.sqrt(alpha) * x + np.sqrt(1.0 - alpha) * eps_c
    return x, m + K


def conditional_denoising(model, schedule, x_noised, target, s: float, t_start: int):
    """Guided reverse pass from ``t_start`` to 0 toward ``target`` (id or per-row ids)."""

    def noise(x, t):
        uncond = predict_noise(model, x, None, t, schedule)
        cond = predict_noise(model, x, target, t, schedule)
        return cfg_combine(uncond, cond, s)

    return reverse(model, schedule, x_noised, t_start, noise)


def prototype_verdict(bank: PrototypeBank, distance: float, target: int, l: float, h: float) -> str:  # noqa: E741
    lo, hi = bank.bounds(target, l, h)
    if distance < lo:
        return REJECTED_NEAR
    if distance > hi:
        return REJECTED_FAR
    return PROTO_PASS


def prototype_distances(bank: PrototypeBank, clf: Classifier, x, targets) -> np.ndarray:
    """Cosine distance of each row to its target prototype.

    A row whose feature vector vanishes has no direction; it gets distance
    1.0 (zero cosine similarity).
    """
    x = np.atleast_2d(x)
    phi = clf.features(x)
    norms = np.linalg.norm(phi, axis=1)
    out = np.ones(x.shape[0])
    ok = norms >= 1e-12
    unit = phi[ok] / norms[ok, None]
    protos = bank.prototypes[np.asarray(targets)[ok]]
    out[ok] = np.clip(1.0 - np.einsum("ij,ij->i", unit, protos), 0.0, 2.0)
    return out


def prototype_distance_filter(bank, clf, record: GenerationRecord, l, h) -> str:  # noqa: E741
    dist = prototype_distances(bank, clf, record.x_generated, [record.y_target])[0]
    return prototype_verdict(bank, dist, record.y_target, l, h)


def confcred_removes(predicted, top_prob, cred, y_source, y_target, a_c) -> bool:
    """Remove only confident, credible predictions of a class that is neither source nor target."""
    if predicted == y_source or predicted == y_target:
        return False
    return top_prob > a_c and cred > a_c


def confcred_filter(clf: Classifier, record: GenerationRecord, a_c: float) -> bool:
    """True when the record survives the confidence-credibility branch."""
    p = clf.probabilities(record.x_generated)
    ranked = np.sort(p)
    predicted = int(np.argmax(p))
    return not confcred_removes(
        predicted, ranked[-1], ranked[-1] - ranked[-2], record.y_source, record.y_target, a_c
    )


def class_thresholds(counts, a_max: float = 0.9, a_min: float = 0.5) -> np.ndarray:
    """Linear decay from ``a_max`` (largest class) to ``a_min`` (smallest), by count rank."""
    counts = np.asarray(counts)
    C = counts.size
    order = sorted(range(C), key=lambda c: (-int(counts[c]), c))
    out = np.empty(C)
    for rank, c in enumerate(order):
        out[c] = a_max - (a_max - a_min) * rank / max(C - 1, 1)
    return out


def candidate_counts(dataset: LabeledDataset, cfg: DbgConfig) -> np.ndarray:
    """Candidates to draw per source sample."""
    counts = dataset.class_counts
    if not cfg.tail_oversample:
        return np.full(dataset.n, cfg.per_sample_count, dtype=np.int64)
    factor = np.round(cfg.per_sample_count * counts.max() / counts[dataset.labels]).astype(np.int64)
    return np.clip(factor, cfg.per_sample_count, OVERSAMPLE_CAP * cfg.per_sample_count)


def judge(bank, thresholds, cfg: DbgConfig, y_source, y_target, distance, predicted, top_prob, cred):
    verdict = prototype_verdict(bank, distance, y_target, cfg.l, cfg.h)
    if verdict != PROTO_PASS:
        return verdict
    if confcred_removes(predicted, top_prob, cred, y_source, y_target, thresholds[y_target]):
        return REJECTED_CONFCRED
    return ACCEPTED


def score_candidates(clf, bank, x_generated, y_target):
    dist = prototype_distances(bank, clf, x_generated, y_target)
    logits = np.atleast_2d(clf.logits(x_generated))
    p = clf.probabilities(x_generated)
    ranked = np.sort(p, axis=1)
    n = logits.shape[0]
    return {
        "distance": dist,
        "conf": logits[np.arange(n), y_target],
        "top_prob": ranked[:, -1],
        "cred": np.clip(ranked[:, -1] - ranked[:, -2], 0.0, 1.0),
        "predicted": np.argmax(p, axis=1),
    }


def refilter(records, bank, clf, thresholds, cfg: DbgConfig) -> list[str]:
    """Recompute verdicts for emitted records from their generated points alone."""
    if not records:
        return []
    x = np.vstack([r.x_generated for r in records])
    ys = np.array([r.y_source for r in records])
    yt = np.array([r.y_target for r in records])
    sc = score_candidates(clf, bank, x, yt)
    return [
        judge(bank, thresholds, cfg, ys[i], yt[i], sc["distance"][i], sc["predicted"][i],
              sc["top_prob"][i], sc["cred"][i])
        for i in range(len(records))
    ]


@dataclass
class DbgResult:
    augmented: LabeledDataset
    records: list
    summary: dict
    bank: PrototypeBank
    thresholds: np.ndarray


def run_dbg(
    dataset: LabeledDataset,
    clf: Classifier,
    model: GmmScoreModel,
    schedule: NoiseSchedule,
    cfg: DbgConfig | None = None,
) -> DbgResult:
    """Generate near-boundary candidates for every source sample, filter them,
    and union the accepted ones (relabeled to their target) with ``dataset``.

    Candidate ``j`` of source ``i`` draws its starting noise from the stream
    ``(seed, i, j)``; records are ordered by source then candidate index.
    """
    cfg = cfg or DbgConfig()
    bank = build_prototypes(clf, dataset)
    thresholds = class_thresholds(dataset.class_counts, cfg.a_max, cfg.a_min)
    targets = select_target_labels(clf, dataset.features, dataset.labels, cfg.w)
    per_source = candidate_counts(dataset, cfg)

    src = np.repeat(np.arange(dataset.n), per_source)
    cand = np.concatenate([np.arange(k) for k in per_source]) if src.size else np.empty(0, int)
    eps = np.array(
        [np.random.default_rng([cfg.seed, int(i), int(j)]).standard_normal(dataset.dim)
         for i, j in zip(src, cand)]
    ).reshape(src.size, dataset.dim)

    x0 = dataset.features[src]
    y_src = dataset.labels[src]
    y_tgt = targets[src]
    x_noised, t_end = conditional_noising(
        model, schedule, x0, y_src, eps=eps, steps=cfg.noise_steps, rule=cfg.noising_rule
    )
    x_gen = conditional_denoising(model, schedule, x_noised, y_tgt, cfg.s, t_end)

    sc = score_candidates(clf, bank, x_gen, y_tgt)
    records = []
    for r in range(src.size):
        verdict = judge(bank, thresholds, cfg, y_src[r], y_tgt[r], sc["distance"][r],
                        sc["predicted"][r], sc["top_prob"][r], sc["cred"][r])
        records.append(
            GenerationRecord(
                source_index=int(src[r]),
                candidate_index=int(cand[r]),
                x_source=x0[r].copy(),
                y_source=int(y_src[r]),
                y_target=int(y_tgt[r]),
                x_generated=x_gen[r].copy(),
                proto_distance=float(sc["distance"][r]),
                conf=float(sc["conf"][r]),
                cred=float(sc["cred"][r]),
                top_prob=float(sc["top_prob"][r]),
                predicted_class=int(sc["predicted"][r]),
                verdict=verdict,
            )
        )

    accepted = [rec for rec in records if rec.verdict == ACCEPTED]
    if accepted:
        augmented = augment(
            dataset,
            np.vstack([rec.x_generated for rec in accepted]),
            [rec.y_target for rec in accepted],
        )
    else:
        augmented = augment(dataset, np.empty((0, dataset.dim)), [])
    summary = summarize(records, dataset.num_classes, cfg)
    return DbgResult(augmented, records, summary, bank, thresholds)


def summarize(records, num_classes: int, cfg: DbgConfig) -> dict:
    counts = {v: 0 for v in VERDICTS}
    per_class = [0] * num_classes
    for rec in records:
        counts[rec.verdict] += 1
        if rec.verdict == ACCEPTED:
            per_class[rec.y_target] += 1
    total = len(records)
    return {
        "candidates": total,
        "verdicts": counts,
        "accepted_per_class": per_class,
        "acceptance_rate": counts[ACCEPTED] / total if total else 0.0,
        "config": asdict(cfg),
    }

