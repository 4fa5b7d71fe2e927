"""Experiment stages behind the CLI subcommands, plus the three-arm comparison.

Each stage reads its inputs from the output directory, writes its artifacts
there, and records them in ``manifest_<stage>.json`` with a SHA-256 per file.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from blab import plotting
from blab.classifier import Classifier, train
from blab.config import ExperimentConfig
from blab.data import (
    GroupSplit,
    LabeledDataset,
    MixtureSpec,
    augment,
    load_dataset,
    make_longtail_mixture,
    sample_mixture,
    save_dataset,
    split_groups,
)
from blab.dbg import run_dbg
from blab.diffusion import MODIFIED, GmmScoreModel, GuidanceConfig, default_schedule, linear_schedule, sample
from blab.errors import ConfigError, MissingDependency
from blab.metrics import (
    generate_confidence_batches,
    generation_confidence,
    nearest_head_disturber,
    outlier_rate,
    overlap_matrix,
    write_csv,
)

log = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
BALANCED_FILE = "balanced.jsonl"
MIXTURE_FILE = "mixture.json"
CLF_FILE = "clf.json"
CLF_BALANCED_FILE = "clf_balanced.json"

# Independent seed streams under one experiment seed.
STREAM_TEST = 2
STREAM_BALANCED = 3
STREAM_H2T = 7


@dataclass
class Benchmark:
    train: LabeledDataset
    test: LabeledDataset
    balanced: LabeledDataset
    spec: MixtureSpec
    groups: GroupSplit


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    ds = cfg.dataset
    train_set, spec = make_longtail_mixture(
        ds.classes, ds.dim, ds.n_max, ds.ratio, ds.sep, ds.sigma, ds.seed
    )
    test = sample_mixture(
        spec, [ds.n_test] * ds.classes, np.random.default_rng([ds.seed, STREAM_TEST])
    )
    per_class = cfg.compare.balanced_per_class or ds.n_max
    balanced = sample_mixture(
        spec, [per_class] * ds.classes, np.random.default_rng([ds.seed, STREAM_BALANCED])
    )
    return Benchmark(train_set, test, balanced, spec, split_groups(train_set))


def make_schedule(cfg: ExperimentConfig):
    d = cfg.diffusion
    try:
        if d.beta_start is None:
            return default_schedule(d.T)
        return linear_schedule(d.T, d.beta_start, d.beta_end)
    except ValueError as exc:
        raise ConfigError(f"diffusion: {exc}") from None


def group_accuracy(clf: Classifier, test: LabeledDataset, groups: GroupSplit) -> dict:
    pred = clf.predict(test.features)
    hit = pred == test.labels
    out = {}
    for name, members in groups.items():
        mask = np.isin(test.labels, sorted(members))
        out[f"{name}_acc"] = float(hit[mask].mean())
    out["overall_acc"] = float(hit.mean())
    return out


def h2t_generations(model, schedule, train_set, groups, scale, seed):
    """Modified-CFG draws that top every tail class up to the largest class count.

    Each tail class is the target and its nearest head class the disturber.
    Returns features, labels and per-row generation metadata.
    """
    disturbers = nearest_head_disturber(model.spec.means, groups)
    counts = train_set.class_counts
    xs, ys, meta = [], [], []
    for c in sorted(groups.tail):
        n = int(counts.max() - counts[c])
        if n <= 0:
            continue
        guidance = GuidanceConfig(scale, c, MODIFIED, disturbers[c])
        stream = [seed, STREAM_H2T, c]
        xs.append(np.atleast_2d(sample(model, schedule, guidance, stream, n=n)))
        ys += [c] * n
        meta += [{"mode": MODIFIED, "s": scale, "y_t": c, "y_d": disturbers[c], "seed": stream}] * n
    if not xs:
        return np.empty((0, train_set.dim)), np.empty(0, dtype=np.int64), []
    return np.vstack(xs), np.array(ys), meta


@dataclass
class ArmResult:
    name: str
    clf: Classifier
    accuracy: dict
    overlap: object
    outliers: object

    def row(self) -> dict:
        return {
            "arm": self.name,
            **self.accuracy,
            "overlap_mean": self.overlap.off_diagonal_mean(),
            "outlier_overall": self.outliers.groups["overall"],
            "outlier_tail": self.outliers.groups["tail"],
        }


def evaluate_arm(name, clf, bench: Benchmark, cfg: ExperimentConfig) -> ArmResult:
    m = cfg.metrics
    overlap = overlap_matrix(
        bench.test.features,
        bench.test.labels,
        clf,
        m=m.mc_samples,
        seed=m.seed,
        num_classes=bench.test.num_classes,
        estimator=m.overlap_estimator,
    )
    outliers = outlier_rate(clf.features(bench.test.features), bench.test.labels, m.lambdas, bench.groups)
    return ArmResult(name, clf, group_accuracy(clf, bench.test, bench.groups), overlap, outliers)


@dataclass
class ComparisonReport:
    arms: list
    confidence: dict
    dbg_summary: dict
    h2t: tuple = field(repr=False, default=None)
    dbg_result: object = field(repr=False, default=None)

    def rows(self) -> list[dict]:
        return [arm.row() for arm in self.arms]

    def arm(self, name) -> ArmResult:
        return next(a for a in self.arms if a.name == name)


COMPARE_COLUMNS = (
    "arm",
    "head_acc",
    "med_acc",
    "tail_acc",
    "overall_acc",
    "overlap_mean",
    "outlier_overall",
    "outlier_tail",
)


def run_compare(cfg: ExperimentConfig, bench: Benchmark | None = None) -> ComparisonReport:
    """Train the imbalanced, head-to-tail and boundary-aware arms plus a balanced
    control, and evaluate all of them on the same balanced test set.

    Training only ever sees ``bench.train``, ``bench.balanced`` and generated
    rows; the test set is touched only by evaluation.
    """
    bench = bench or build_benchmark(cfg)
    schedule = make_schedule(cfg)
    model = GmmScoreModel(bench.spec.with_priors(bench.train.priors))
    seed = cfg.dataset.seed

    clf_a = train(bench.train, cfg.train)
    clf_bal = train(bench.balanced, cfg.train)

    h2t_x, h2t_y, h2t_meta = h2t_generations(
        model, schedule, bench.train, bench.groups, cfg.compare.h2t_scale, seed
    )
    clf_b = train(augment(bench.train, h2t_x, h2t_y), cfg.train)

    dbg = run_dbg(bench.train, clf_a, model, schedule, cfg.dbg)
    clf_c = train(dbg.augmented, cfg.train)

    arms = [
        evaluate_arm("imbalanced", clf_a, bench, cfg),
        evaluate_arm("balanced", clf_bal, bench, cfg),
        evaluate_arm("h2t", clf_b, bench, cfg),
        evaluate_arm("dbg", clf_c, bench, cfg),
    ]

    # Head-to-tail generations vs plain conditional generations of the same
    # tail classes, both scored by the balanced classifier.
    ref = []
    for c in sorted(bench.groups.tail):
        guidance = GuidanceConfig(cfg.compare.reference_scale, c)
        x = sample(model, schedule, guidance, [seed, STREAM_H2T, c, 1], n=cfg.metrics.confidence_per_class)
        ref.append(clf_bal.confidence(np.atleast_2d(x), c))
    confidence = {
        "h2t_mean_conf": float(clf_bal.confidence(h2t_x, h2t_y).mean()) if len(h2t_y) else float("nan"),
        "reference_mean_conf": float(np.concatenate(ref).mean()),
        "h2t_scale": cfg.compare.h2t_scale,
        "reference_scale": cfg.compare.reference_scale,
    }
    return ComparisonReport(arms, confidence, dbg.summary, (h2t_x, h2t_y, h2t_meta), dbg)


# ---------------------------------------------------------------------------
# Artifact plumbing
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.dataset.seed,
        "files": {name: sha256_file(out / name) for name in sorted(files)},
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def require(out: Path, *names) -> None:
    for name in names:
        if not (out / name).exists():
            raise MissingDependency(f"missing upstream artifact {out / name}")


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_mixture(out: Path) -> MixtureSpec:
    return MixtureSpec.from_dict(json.loads((out / MIXTURE_FILE).read_text(encoding="utf-8")))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def cmd_gen(cfg: ExperimentConfig, out: Path, figures: bool = True) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(cfg)
    save_dataset(bench.train, out / TRAIN_FILE)
    save_dataset(bench.test, out / TEST_FILE)
    save_dataset(bench.balanced, out / BALANCED_FILE)
    write_json(out / MIXTURE_FILE, bench.spec.to_dict())
    files = [TRAIN_FILE, TEST_FILE, BALANCED_FILE, MIXTURE_FILE]
    if cfg.dataset.dim == 2:
        write_csv(_scatter_rows(bench.train), out / "scatter_train.csv")
        files.append("scatter_train.csv")
        if figures:
            plotting.plot_scatter(bench.train.features, bench.train.labels, out / "scatter_train.png")
            files.append("scatter_train.png")
    write_manifest(out, "gen", cfg, files)
    return files


def cmd_train(cfg: ExperimentConfig, out: Path, figures: bool = True) -> list[str]:
    require(out, TRAIN_FILE, BALANCED_FILE)
    clf = train(load_dataset(out / TRAIN_FILE), cfg.train)
    clf.save(out / CLF_FILE)
    clf_bal = train(load_dataset(out / BALANCED_FILE), cfg.train)
    clf_bal.save(out / CLF_BALANCED_FILE)
    files = [CLF_FILE, CLF_BALANCED_FILE]
    write_manifest(out, "train", cfg, files)
    return files


def cmd_metrics(cfg: ExperimentConfig, out: Path, figures: bool = True) -> list[str]:
    require(out, TRAIN_FILE, TEST_FILE, MIXTURE_FILE, CLF_FILE, CLF_BALANCED_FILE)
    train_set = load_dataset(out / TRAIN_FILE)
    test = load_dataset(out / TEST_FILE)
    spec = read_mixture(out)
    clf = Classifier.load(out / CLF_FILE)
    clf_bal = Classifier.load(out / CLF_BALANCED_FILE)
    groups = split_groups(train_set)
    m = cfg.metrics

    overlap = overlap_matrix(
        test.features, test.labels, clf, m=m.mc_samples, seed=m.seed,
        num_classes=test.num_classes, estimator=m.overlap_estimator,
    )
    outliers = outlier_rate(clf.features(test.features), test.labels, m.lambdas, groups)
    write_csv(overlap.to_rows(), out / "overlap.csv")
    write_csv(outliers.rows(), out / "outliers.csv")
    write_csv(_group_rows(outliers), out / "outlier_groups.csv")

    model = GmmScoreModel(spec)
    batches = generate_confidence_batches(
        model, make_schedule(cfg), range(spec.num_classes),
        nearest_head_disturber(spec.means, groups), m.confidence_scales,
        m.confidence_per_class, m.seed,
    )
    confidence = generation_confidence(clf_bal, batches, groups)
    write_csv(confidence.rows(), out / "confidence.csv")
    _save_batches(batches, spec.num_classes, m.seed, out / "generated.jsonl")

    files = ["overlap.csv", "outliers.csv", "outlier_groups.csv", "confidence.csv", "generated.jsonl"]
    if test.dim == 2:
        write_csv(_scatter_rows(test), out / "scatter_test.csv")
        files.append("scatter_test.csv")
    if figures:
        plotting.plot_overlap_matrix(overlap.values, out / "overlap.png")
        plotting.plot_outlier_rates(outliers, out / "outliers.png", groups)
        plotting.plot_confidence(confidence, out / "confidence.png")
        files += ["overlap.png", "outliers.png", "confidence.png"]
    write_manifest(out, "metrics", cfg, files)
    return files


def cmd_dbg(cfg: ExperimentConfig, out: Path, figures: bool = True) -> list[str]:
    require(out, TRAIN_FILE, MIXTURE_FILE, CLF_FILE)
    train_set = load_dataset(out / TRAIN_FILE)
    clf = Classifier.load(out / CLF_FILE)
    spec = read_mixture(out)
    model = GmmScoreModel(spec.with_priors(train_set.priors))
    result = run_dbg(train_set, clf, model, make_schedule(cfg), cfg.dbg)
    save_records(result.records, out / "records.jsonl")
    write_json(out / "summary.json", result.summary)
    save_dataset(result.augmented, out / "augmented.jsonl")
    files = ["records.jsonl", "summary.json", "augmented.jsonl"]
    write_manifest(out, "dbg", cfg, files)
    return files


def cmd_compare(cfg: ExperimentConfig, out: Path, figures: bool = True) -> ComparisonReport:
    out.mkdir(parents=True, exist_ok=True)
    report = run_compare(cfg)
    rows = report.rows()
    write_csv(
        [list(COMPARE_COLUMNS)]
        + [[r["arm"]] + [_fmt(r[c]) for c in COMPARE_COLUMNS[1:]] for r in rows],
        out / "comparison.csv",
    )
    files = ["comparison.csv"]
    for arm in report.arms:
        write_csv(arm.overlap.to_rows(), out / f"overlap_{arm.name}.csv")
        write_csv(arm.outliers.rows(), out / f"outliers_{arm.name}.csv")
        files += [f"overlap_{arm.name}.csv", f"outliers_{arm.name}.csv"]
    h2t_x, h2t_y, h2t_meta = report.h2t
    _save_generated(h2t_x, h2t_y, h2t_meta, cfg.dataset.classes, out / "h2t_generated.jsonl")
    write_json(out / "compare_summary.json", {"confidence": report.confidence, "dbg": report.dbg_summary})
    files += ["h2t_generated.jsonl", "compare_summary.json"]
    if figures:
        plotting.plot_comparison(rows, out / "comparison.png")
        files.append("comparison.png")
        for arm in report.arms:
            plotting.plot_overlap_matrix(
                arm.overlap.values, out / f"overlap_{arm.name}.png", title=f"log BC: {arm.name}"
            )
            files.append(f"overlap_{arm.name}.png")
    write_manifest(out, "compare", cfg, files)
    return report


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "metrics": cmd_metrics,
    "dbg": cmd_dbg,
    "compare": cmd_compare,
}


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_records(path):
    from blab.dbg import GenerationRecord

    with open(path, encoding="utf-8") as fh:
        return [GenerationRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def _group_rows(report):
    yield ["group", "outlier_rate"]
    for name in ("head", "med", "tail", "overall"):
        if name in report.groups:
            yield [name, _fmt(report.groups[name])]


def _scatter_rows(dataset):
    yield ["x", "y", "label"]
    for (a, b), label in zip(dataset.features, dataset.labels):
        yield [_fmt(a), _fmt(b), str(int(label))]


def _save_generated(x, y, meta, num_classes, path) -> None:
    """Generated rows in the dataset format with a ``gen_meta`` field per row.

    Written directly rather than through ``LabeledDataset`` because a batch
    usually covers only some classes.
    """
    from blab.data import _row

    x = np.asarray(x).reshape(len(y), -1) if len(y) else np.empty((0, 0))
    dim = x.shape[1] if len(y) else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": {"dim": dim, "classes": num_classes}}) + "\n")
        for xi, yi, mi in zip(x, y, meta):
            fh.write(_row(yi, xi, {"gen_meta": mi}) + "\n")


def _save_batches(batches, num_classes, seed, path) -> None:
    x, y, meta = [], [], []
    for b in batches:
        rows = np.atleast_2d(b.samples)
        x.append(rows)
        y += [b.target] * rows.shape[0]
        meta += [{"mode": b.mode, "s": b.scale, "y_t": b.target, "y_d": b.disturb, "seed": seed}] * rows.shape[0]
    _save_generated(np.vstack(x), y, meta, num_classes, path)
