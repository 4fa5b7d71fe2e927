"""One-hidden-layer ReLU classifier trained with the logit-adjusted cross-entropy.

The hidden activation is the feature map used by the metrics and the
prototype filter.  Training adds ``tau * log(prior)`` to the logits inside
the loss only; every inference method returns raw logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from blab.data import LabeledDataset
from blab.errors import (
    DimensionMismatch,
    InvalidArgument,
    InvariantViolation,
    NumericDivergence,
    ParseError,
    ZeroFeatureVector,
)

CHECKPOINT_VERSION = "clf-v1"
PARAM_NAMES = ("hidden_weights", "hidden_bias", "head_weights", "head_bias")
_ZERO_NORM = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.1
    # Epochs at which the step size is multiplied by 0.1; None means 80% and 90% of ``epochs``.
    lr_decay_epochs: tuple | None = None
    tau: float = 1.0
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidArgument(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.tau >= 0:
            raise InvalidArgument(f"tau must be nonnegative, got {self.tau}")
        if self.hidden < 1:
            raise InvalidArgument(f"hidden width must be >= 1, got {self.hidden}")

    def decay_epochs(self) -> tuple:
        if self.lr_decay_epochs is not None:
            return tuple(int(e) for e in self.lr_decay_epochs)
        return (int(0.8 * self.epochs), int(0.9 * self.epochs))


@dataclass
class Classifier:
    hidden_weights: np.ndarray  # d x H
    hidden_bias: np.ndarray  # H
    head_weights: np.ndarray  # H x C
    head_bias: np.ndarray  # C
    priors: np.ndarray
    trained: bool = False
    history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvariantViolation(f"{name} has non-finite entries")
            setattr(self, name, arr)
        d, H = self.hidden_weights.shape
        if self.hidden_bias.shape != (H,) or self.head_weights.shape[0] != H:
            raise InvariantViolation("hidden layer shapes disagree")
        C = self.head_weights.shape[1]
        self.priors = np.asarray(self.priors, dtype=float)
        if self.head_bias.shape != (C,) or self.priors.shape != (C,):
            raise InvariantViolation("head bias and priors must have one entry per class")
        if abs(self.priors.sum() - 1.0) > 1e-9 or np.any(self.priors < 0):
            raise InvariantViolation("priors must be nonnegative and sum to 1")

    @property
    def dim(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def width(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_weights.shape[1]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected inputs of dimension {self.dim}, got {x.shape[-1]}")
        return x

    def features(self, x) -> np.ndarray:
        x = self._check(x)
        return np.maximum(x @ self.hidden_weights + self.hidden_bias, 0.0)

    def normalized_features(self, x) -> np.ndarray:
        phi = self.features(x)
        norm = np.linalg.norm(phi, axis=-1, keepdims=True)
        if np.any(norm < _ZERO_NORM):
            raise ZeroFeatureVector("feature vector has (near) zero norm; cannot normalize")
        return phi / norm

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.head_weights + self.head_bias

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.logits(x), axis=-1)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def confidence(self, x, target) -> np.ndarray:
        """Raw logit of the target class."""
        target = self._class_index(target)
        logits = np.atleast_2d(self.logits(x))
        n = logits.shape[0]
        conf = logits[np.arange(n), np.broadcast_to(target, (n,))]
        return conf if np.ndim(x) > 1 else conf[0]

    def credibility(self, x, disturb=None) -> np.ndarray:
        """Top probability minus the probability of ``disturb``.

        With ``disturb=None`` the runner-up class is used.
        """
        p = np.atleast_2d(self.probabilities(x))
        top = p.max(axis=-1)
        if disturb is None:
            other = np.sort(p, axis=-1)[:, -2]
        else:
            disturb = self._class_index(disturb)
            other = p[np.arange(p.shape[0]), np.broadcast_to(disturb, top.shape)]
        cred = np.clip(top - other, 0.0, 1.0)
        return cred if np.ndim(x) > 1 else cred[0]

    def topk_confusable(self, x, k: int, label: int | None = None) -> list[int]:
        """The ``k`` highest-logit classes for a single input, excluding ``label``.

        Ordered by descending logit, ties broken toward the lower class index.
        """
        C = self.num_classes
        if not 1 <= k <= C - 1:
            raise InvalidArgument(f"k must be in [1, {C - 1}], got {k}")
        logits = np.asarray(self.logits(x), dtype=float).reshape(-1)
        return topk_from_logits(logits, k, label)

    def _class_index(self, c):
        c = np.asarray(c, dtype=np.int64)
        if np.any(c < 0) or np.any(c >= self.num_classes):
            raise InvalidArgument(f"class index out of range [0, {self.num_classes})")
        return c

    def to_json(self) -> str:
        params = {
            name: {"shape": list(arr.shape), "data": [format(float(v), ".17g") for v in arr.ravel()]}
            for name, arr in self.params().items()
        }
        payload = {
            "version": CHECKPOINT_VERSION,
            "params": params,
            "priors": [format(float(v), ".17g") for v in self.priors],
            "trained": self.trained,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> Classifier:
        try:
            payload = json.loads(text)
            if payload.get("version") != CHECKPOINT_VERSION:
                raise ParseError(f"unsupported checkpoint version {payload.get('version')!r}")
            arrays = {}
            for name in PARAM_NAMES:
                entry = payload["params"][name]
                arrays[name] = np.array([float(v) for v in entry["data"]]).reshape(entry["shape"])
            priors = np.array([float(v) for v in payload["priors"]])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed checkpoint: {exc}") from None
        return cls(**arrays, priors=priors, trained=bool(payload.get("trained", False)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> Classifier:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def topk_from_logits(logits, k, exclude=None) -> list[int]:
    order = sorted(range(len(logits)), key=lambda c: (-logits[c], c))
    if exclude is not None:
        order = [c for c in order if c != exclude]
    return order[:k]


def init_classifier(dim: int, num_classes: int, hidden: int, priors, rng) -> Classifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    b1 = 1.0 / np.sqrt(dim)
    b2 = 1.0 / np.sqrt(hidden)
    return Classifier(
        hidden_weights=rng.uniform(-b1, b1, size=(dim, hidden)),
        hidden_bias=rng.uniform(-b1, b1, size=hidden),
        head_weights=rng.uniform(-b2, b2, size=(hidden, num_classes)),
        head_bias=rng.uniform(-b2, b2, size=num_classes),
        priors=np.asarray(priors, dtype=float),
    )


def logit_adjustment(priors, tau: float) -> np.ndarray:
    return tau * np.log(np.asarray(priors, dtype=float))


def loss_and_grad(params: dict, x, y, adjustment):
    """Mean cross-entropy of ``logits + adjustment`` and its parameter gradients."""
    W1, b1, W2, b2 = (params[name] for name in PARAM_NAMES)
    pre = x @ W1 + b1
    h = np.maximum(pre, 0.0)
    z = h @ W2 + b2 + adjustment
    logp = log_softmax(z, axis=1)
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean()

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    dh = (dz @ W2.T) * (pre > 0)
    grads = {
        "hidden_weights": x.T @ dh,
        "hidden_bias": dh.sum(axis=0),
        "head_weights": h.T @ dz,
        "head_bias": dz.sum(axis=0),
    }
    return loss, grads


def train(dataset: LabeledDataset, cfg: TrainConfig | None = None) -> Classifier:
    """Mini-batch gradient descent on the logit-adjusted loss.

    Initialization and shuffling draw from separate streams derived from
    ``cfg.seed``, so equal configs give bit-identical parameters.
    """
    cfg = cfg or TrainConfig()
    priors = dataset.priors
    clf = init_classifier(
        dataset.dim, dataset.num_classes, cfg.hidden, priors, np.random.default_rng([cfg.seed, 0])
    )
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    adjustment = logit_adjustment(priors, cfg.tau)
    x, y = dataset.features, dataset.labels
    params = clf.params()
    decay_at = cfg.decay_epochs()

    initial, _ = loss_and_grad(params, x, y, adjustment)
    history = [float(initial)]
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch in decay_at:
            lr *= 0.1
        order = shuffle_rng.permutation(dataset.n)
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(params, x[idx], y[idx], adjustment)
            for name in PARAM_NAMES:
                params[name] -= lr * grads[name]
        loss, _ = loss_and_grad(params, x, y, adjustment)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NumericDivergence("training loss became non-finite", epoch=epoch + 1)
        history.append(float(loss))

    for name, value in params.items():
        setattr(clf, name, value)
    clf.trained = True
    clf.history = history
    return clf
