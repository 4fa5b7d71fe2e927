import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from blab.classifier import (
    Classifier,
    TrainConfig,
    init_classifier,
    logit_adjustment,
    loss_and_grad,
    train,
)
from blab.data import LabeledDataset
from blab.errors import (
    DimensionMismatch,
    InvalidArgument,
    InvariantViolation,
    NumericDivergence,
    ParseError,
    ZeroFeatureVector,
)

from conftest import two_blobs


def fixed_logits(values, dim=2):
    """Classifier whose logits equal ``values`` for every input."""
    values = np.asarray(values, dtype=float)
    C = values.size
    return Classifier(
        hidden_weights=np.eye(dim),
        hidden_bias=np.zeros(dim),
        head_weights=np.zeros((dim, C)),
        head_bias=values,
        priors=np.full(C, 1.0 / C),
    )


def identity_features(C=2, dim=2):
    """phi(x) = max(x, 0)."""
    return Classifier(np.eye(dim), np.zeros(dim), np.zeros((dim, C)), np.zeros(C), np.full(C, 1.0 / C))


def random_classifier(dim=3, C=4, hidden=5, seed=0):
    rng = np.random.default_rng(seed)
    return init_classifier(dim, C, hidden, np.full(C, 1.0 / C), rng)


def test_separable_two_class_reaches_high_accuracy():
    data = two_blobs(n=150, d=2, gap=8.0, seed=1)
    clf = train(data, TrainConfig(epochs=20, seed=0))
    assert (clf.predict(data.features) == data.labels).mean() >= 0.99
    assert clf.trained


def test_training_lowers_loss_and_is_deterministic():
    data = two_blobs(n=80, d=3, gap=3.0, seed=2)
    a = train(data, TrainConfig(epochs=10, seed=5))
    b = train(data, TrainConfig(epochs=10, seed=5))
    assert np.isfinite(a.history[-1]) and a.history[-1] < a.history[0]
    for name, value in a.params().items():
        assert np.array_equal(value, b.params()[name])


def test_zero_epochs_rejected():
    with pytest.raises(InvalidArgument):
        TrainConfig(epochs=0)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(tau=-1.0), dict(batch_size=0)])
def test_train_config_bounds(kwargs):
    with pytest.raises(InvalidArgument):
        TrainConfig(**kwargs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    data = two_blobs(n=50, d=2, gap=4.0)
    with pytest.raises(NumericDivergence) as info:
        train(LabeledDataset(data.features * 1e150, data.labels, 2), TrainConfig(epochs=3, learning_rate=1e10))
    assert info.value.epoch >= 1


def test_tau_is_constant_shift_under_equal_priors():
    # With equal priors the adjustment adds the same constant to every logit,
    # so the loss equals plain cross-entropy on the raw logits.
    clf = random_classifier(C=4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(16, 3))
    y = rng.integers(0, 4, 16)
    adjusted, _ = loss_and_grad(clf.params(), x, y, logit_adjustment(np.full(4, 0.25), 1.0))
    p = softmax(clf.logits(x), axis=1)
    reference = -np.log(p[np.arange(16), y]).mean()
    assert adjusted == pytest.approx(reference, rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    clf = random_classifier(dim=3, C=4, hidden=6, seed=3)
    x = rng.normal(size=(20, 3))
    y = rng.integers(0, 4, 20)
    adj = logit_adjustment(np.array([0.5, 0.3, 0.15, 0.05]), 1.0)
    params = {k: v.copy() for k, v in clf.params().items()}
    _, grads = loss_and_grad(params, x, y, adj)
    names = list(params)
    step = 1e-6
    for trial in range(10):
        name = names[trial % len(names)]
        idx = tuple(rng.integers(0, s) for s in params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + step
        up, _ = loss_and_grad(params, x, y, adj)
        params[name][idx] = orig - step
        down, _ = loss_and_grad(params, x, y, adj)
        params[name][idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[name][idx]
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-8)


def test_balanced_data_tau_does_not_change_argmax():
    data = two_blobs(n=60, d=2, gap=2.0, seed=4)
    clf = train(data, TrainConfig(epochs=5, seed=1))
    x = np.random.default_rng(0).normal(size=(50, 2))
    shifted = clf.logits(x) + logit_adjustment(data.priors, 1.0)
    assert np.array_equal(np.argmax(shifted, axis=1), clf.predict(x))


def test_zero_weights_give_bias_logits():
    clf = fixed_logits([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(clf.logits(np.array([3.0, -7.0])), [0.5, -1.0, 2.0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_probabilities_are_softmax_of_logits(x):
    clf = random_classifier(dim=2, C=4, hidden=5)
    x = np.array(x)
    p = clf.probabilities(x)
    np.testing.assert_allclose(p, softmax(clf.logits(x)), rtol=0, atol=1e-15)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.argmax(p) == np.argmax(clf.logits(x))


def test_argmax_invariant_to_constant_logit_shift():
    clf = random_classifier(dim=2, C=4, hidden=5)
    x = np.random.default_rng(2).normal(size=(30, 2))
    shifted = Classifier(clf.hidden_weights, clf.hidden_bias, clf.head_weights, clf.head_bias + 3.7, clf.priors)
    assert np.array_equal(shifted.predict(x), clf.predict(x))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        random_classifier(dim=3).logits(np.zeros(4))


def test_normalized_features_345():
    clf = identity_features()
    np.testing.assert_allclose(clf.normalized_features(np.array([3.0, 4.0])), [0.6, 0.8], rtol=0, atol=1e-15)


def test_zero_feature_vector_error():
    with pytest.raises(ZeroFeatureVector):
        identity_features().normalized_features(np.array([-1.0, -2.0]))


def test_normalized_features_unit_norm():
    clf = random_classifier(dim=3, C=4, hidden=16, seed=9)
    x = np.random.default_rng(3).normal(size=(100, 3))
    phi = clf.features(x)
    x = x[np.linalg.norm(phi, axis=1) > 1e-6]
    norms = np.linalg.norm(clf.normalized_features(x), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-9)
    assert clf.features(x).shape[1] == 16


def test_credibility_hand_example():
    # p = (0.5, 0.3, 0.2); Cred against class 1 = 0.5 - 0.3
    clf = fixed_logits(np.log([0.5, 0.3, 0.2]))
    assert clf.credibility(np.zeros(2), 1) == pytest.approx(0.2, abs=1e-12)
    assert clf.credibility(np.zeros(2), 0) == 0.0
    assert clf.credibility(np.zeros(2)) == pytest.approx(0.2, abs=1e-12)


@given(st.lists(st.floats(-8, 8), min_size=4, max_size=4), st.integers(0, 3))
def test_credibility_bounds(logits, disturb):
    clf = fixed_logits(logits)
    cred = clf.credibility(np.zeros(2), disturb)
    assert 0.0 <= cred <= 1.0
    p = clf.probabilities(np.zeros(2))
    if p[disturb] == p.max():
        assert cred == 0.0


def test_confidence_reads_target_logit():
    clf = fixed_logits([1.0, -2.0])
    assert clf.confidence(np.zeros(2), 0) == 1.0
    np.testing.assert_array_equal(clf.confidence(np.zeros((3, 2)), [0, 1, 0]), [1.0, -2.0, 1.0])


def test_class_index_out_of_range():
    with pytest.raises(InvalidArgument):
        fixed_logits([1.0, 2.0]).confidence(np.zeros(2), 2)


def test_topk_sort_and_exclude():
    assert fixed_logits([5, 1, 3, 2]).topk_confusable(np.zeros(2), 2, label=0) == [2, 3]


def test_topk_full_complement():
    assert sorted(fixed_logits([5, 1, 3, 2]).topk_confusable(np.zeros(2), 3, label=1)) == [0, 2, 3]


def test_topk_tie_break_by_index():
    assert fixed_logits([0, 2, 2]).topk_confusable(np.zeros(2), 1, label=0) == [1]


@pytest.mark.parametrize("k", [0, 4])
def test_topk_range(k):
    with pytest.raises(InvalidArgument):
        fixed_logits([5, 1, 3, 2]).topk_confusable(np.zeros(2), k)


def test_checkpoint_round_trip(tmp_path):
    data = two_blobs(n=40, d=2, seed=0)
    clf = train(data, TrainConfig(epochs=3))
    clf.save(tmp_path / "clf.json")
    back = Classifier.load(tmp_path / "clf.json")
    for name, value in clf.params().items():
        assert np.array_equal(value, back.params()[name])
    assert '"version": "clf-v1"' in (tmp_path / "clf.json").read_text()


def test_checkpoint_version_checked():
    with pytest.raises(ParseError):
        Classifier.from_json('{"version": "clf-v0"}')


def test_classifier_invariants():
    with pytest.raises(InvariantViolation):
        Classifier(np.eye(2), np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.array([0.6, 0.6]))
    with pytest.raises(InvariantViolation):
        Classifier(np.eye(2) * np.nan, np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.array([0.5, 0.5]))
