import math

import numpy as np
import pytest
from scipy.spatial.distance import jensenshannon

from osheda.bounds import (
    LN2,
    audit,
    audit_lower_bound,
    audit_models,
    audit_theorem1,
    discrete_js,
    empirical_error,
    estimate_js,
    estimate_js_joint,
    one_hot_js,
    open_set_difference,
    pseudo_label_noise,
    random_audit_configs,
    relabel_to_unknown,
    reports_to_json,
)
from osheda.data import FeatureDataset, LabelSpace, SyntheticConfig, generate_synthetic
from osheda.errors import InvalidConfigError, InvalidInputError, UnsupportedInputError
from osheda.trainer import TrainConfig, TrainedModel, init_rl_osheda

SMALL = dict(n_source=200, n_target_unlabeled=200)


class LogitModel:
    """Stub whose logits and representations are its input features."""

    def __init__(self, n_known, lam=0.5):
        self.label_space = LabelSpace(n_known)
        self.config = TrainConfig(lam=lam)

    def logits(self, x, domain="target"):
        return np.asarray(x, dtype=np.float64)

    def representations(self, x, domain="target"):
        return np.asarray(x, dtype=np.float64)


def one_hot_rows(labels, k, scale=5.0):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = scale
    return out


def labeled(labels, k, domain="target"):
    labels = np.asarray(labels)
    return FeatureDataset(one_hot_rows(labels, k), labels, domain)


# ---------------------------------------------------------------- errors


def test_perfect_and_wrong_predictions():
    m = LogitModel(2)
    assert empirical_error(m, labeled([0, 1, 2, 0], 3)) == 0.0
    ds = FeatureDataset(one_hot_rows([1, 2, 0], 3), np.array([0, 1, 2]), "target")
    assert empirical_error(m, ds) == 1.0


def test_clipped_ce_on_uniform_softmax():
    m = LogitModel(4)
    ds = FeatureDataset(np.zeros((6, 5)), np.arange(6) % 5, "target")
    assert empirical_error(m, ds, "clipped_ce", C=1.0) == 1.0
    assert empirical_error(m, ds, "clipped_ce", C=10.0) == pytest.approx(math.log(5), abs=1e-12)


def test_error_argument_checks():
    m = LogitModel(2)
    with pytest.raises(InvalidConfigError):
        empirical_error(m, labeled([0], 3), "hinge")
    with pytest.raises(InvalidConfigError):
        empirical_error(m, labeled([0], 3), "clipped_ce", C=0.0)
    with pytest.raises(InvalidInputError):
        empirical_error(m, FeatureDataset(np.zeros((1, 3)), None, "target"))


def test_relabel_to_unknown():
    ds = labeled([0, 1, 2], 3)
    out = relabel_to_unknown(ds, 2)
    assert out.labels.tolist() == [2, 2, 2]
    assert out.features.tobytes() == ds.features.tobytes()
    assert relabel_to_unknown(out, 2).labels.tolist() == [2, 2, 2]
    # a classifier that never predicts unknown errs on every relabeled row
    assert empirical_error(LogitModel(2), relabel_to_unknown(labeled([0, 1, 0], 3, "source"), 2)) == 1.0


def _osd_data():
    # target: 4 of 5 rows predicted known (unk error 0.8); source: 9 of 10 predicted known (0.9)
    t = labeled([0, 0, 1, 1, 2], 3)
    s = labeled([0] * 5 + [1] * 4 + [2], 3, "source")
    return t, s


def test_open_set_difference_examples():
    m = LogitModel(2)
    t, s = _osd_data()
    assert open_set_difference(m, t, s, 2 / 3) == pytest.approx(0.2, abs=1e-12)
    assert open_set_difference(m, t, s, 0.0) == pytest.approx(0.8, abs=1e-12)
    assert open_set_difference(m, t, t, 1.0) == 0.0


def test_open_set_difference_is_affine_in_lambda():
    m = LogitModel(2)
    t, s = _osd_data()
    v = [open_set_difference(m, t, s, lam) for lam in (0.0, 0.5, 1.0)]
    assert v[1] == pytest.approx((v[0] + v[2]) / 2, abs=1e-12)


# ---------------------------------------------------------------- JS


def test_discrete_js_closed_form():
    ref = jensenshannon([1.0, 0.0], [0.5, 0.5]) ** 2
    assert discrete_js([1.0, 0.0], [0.5, 0.5]) == pytest.approx(ref, abs=1e-12)
    assert discrete_js([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.21576, abs=5e-6)
    assert discrete_js([1.0, 0.0], [0.0, 1.0]) == pytest.approx(LN2, abs=1e-15)


def test_discrete_js_matches_scipy_on_random_histograms():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        assert discrete_js(p, q) == pytest.approx(jensenshannon(p, q) ** 2, abs=1e-12)


def test_estimate_js_properties():
    rng = np.random.default_rng(1)
    for seed in range(5):
        a = rng.normal(size=(60, 3))
        b = rng.normal(loc=rng.uniform(0, 2), size=(45, 3))
        ab, ba = estimate_js(a, b, 8, seed), estimate_js(b, a, 8, seed)
        assert ab == ba
        assert 0.0 <= ab <= LN2 + 1e-12
        assert estimate_js(a, a.copy(), 8, seed) <= 1e-6


def test_estimate_js_separated_clusters_near_ln2():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(200, 2))
    v = estimate_js(a, a + 100.0, 8)
    assert LN2 - 0.05 <= v <= LN2


def test_estimate_js_rejects_bad_inputs():
    with pytest.raises(InvalidConfigError):
        estimate_js(np.zeros((3, 2)), np.ones((3, 2)), 1)
    with pytest.raises(InvalidInputError):
        estimate_js(np.zeros((3, 2)), np.ones((3, 3)))
    with pytest.raises(InvalidInputError):
        estimate_js(np.zeros((0, 2)), np.ones((3, 2)))


def test_estimate_js_single_point_union_is_zero():
    assert estimate_js(np.ones((4, 2)), np.ones((3, 2))) == 0.0


def test_joint_js_cases():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(80, 3))
    la = rng.integers(0, 3, 80)
    assert estimate_js_joint(a, la, a, la, 8) <= 1e-6
    disjoint = estimate_js_joint(a, np.zeros(80, int), a, np.ones(80, int), 8)
    assert LN2 - 0.05 <= disjoint <= LN2
    b = rng.normal(loc=0.7, size=(50, 3))
    const = estimate_js_joint(a, np.full(80, 2), b, np.full(50, 2), 8, seed=4)
    assert const == pytest.approx(estimate_js(a, b, 8, seed=4), abs=1e-12)
    with pytest.raises(InvalidInputError):
        estimate_js_joint(a, la[:5], b, np.zeros(50, int))


def test_one_hot_js_examples():
    post = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.3, 0.7]])
    js = one_hot_js(np.array([0, 0, 0, 1]), post)
    assert js[0] == 0.0
    assert js[1] == pytest.approx(LN2, abs=1e-15)
    for i in (2, 3):
        e = np.eye(2)[[0, 0, 0, 1][i]]
        assert js[i] == pytest.approx(jensenshannon(e, post[i]) ** 2, abs=1e-12)


def test_random_guess_noise_is_half_ln2():
    post = np.eye(2)[np.arange(1000) % 2]
    pred = np.random.default_rng(5).integers(0, 2, 1000)
    wrong = np.mean(pred != np.arange(1000) % 2)
    assert one_hot_js(pred, post).mean() == pytest.approx(wrong * LN2, abs=1e-12)


# ---------------------------------------------------------------- noise


def test_noise_needs_synthetic_bundle():
    with pytest.raises(UnsupportedInputError):
        pseudo_label_noise(LogitModel(2), object())


def test_noise_in_range_and_bayes_labeler_is_quiet():
    b = generate_synthetic(SyntheticConfig(lambda_true=1.0, noise_std=0.05, **SMALL))
    post = b.known_posterior(b.latents["target_unlabeled"])

    class BayesModel(LogitModel):
        def logits(self, x, domain="target"):
            return np.log(post + 1e-300)

    m = BayesModel(b.label_space.n_known, lam=1.0)
    assert pseudo_label_noise(m, b) <= 1e-6
    rnd = init_rl_osheda(b.source.dim, b.target_unlabeled.dim, b.label_space, TrainConfig(lam=0.7))
    assert 0.0 <= pseudo_label_noise(rnd, b) <= LN2


# ---------------------------------------------------------------- audits


@pytest.fixture(scope="module")
def closed_bundle():
    return generate_synthetic(SyntheticConfig(lambda_true=1.0, **SMALL))


@pytest.fixture(scope="module")
def open_bundle():
    return generate_synthetic(SyntheticConfig(**SMALL))


def test_audit_needs_synthetic_bundle():
    with pytest.raises(UnsupportedInputError):
        audit(LogitModel(2), object())


def test_closed_set_lower_bound_identity(closed_bundle):
    m = init_rl_osheda(closed_bundle.source.dim, closed_bundle.target_unlabeled.dim, closed_bundle.label_space, TrainConfig(lam=1.0))
    r = audit(m, closed_bundle, codebook_size=8)
    assert r.lam == 1.0
    assert r.rhs_lower == r.target_known_error == r.lhs
    assert r.js_unknown_marginal == 0.0
    assert r.holds_upper and r.holds_lower


def test_untrained_model_report_invariants(open_bundle):
    b = open_bundle
    m = init_rl_osheda(b.source.dim, b.target_unlabeled.dim, b.label_space, TrainConfig(lam=b.realized_lambda))
    r = audit_theorem1(m, b, codebook_size=8)
    assert r == audit_lower_bound(m, b, codebook_size=8)
    for v in (r.js_marginal, r.js_joint, r.js_joint_pseudo, r.js_unknown_marginal):
        assert 0.0 <= v <= LN2 + 1e-12
    for v in (r.target_error, r.source_error, r.target_known_error, r.target_unknown_error):
        assert 0.0 <= v <= 1.0
    assert r.C == 1.0 and r.lam == b.realized_lambda
    lam = r.lam
    assert r.lhs == pytest.approx(lam * r.target_known_error + (1 - lam) * r.target_unknown_error, abs=1e-12)
    expected_upper = lam * r.source_error + r.open_set_difference + math.sqrt(2) * lam * (math.sqrt(r.js_marginal) + math.sqrt(r.js_joint))
    assert r.rhs_upper == pytest.approx(expected_upper, abs=1e-12)
    assert r.holds_upper and r.holds_lower


def test_clipped_ce_audit_uses_given_bound(open_bundle):
    b = open_bundle
    m = init_rl_osheda(b.source.dim, b.target_unlabeled.dim, b.label_space, TrainConfig(lam=b.realized_lambda))
    r = audit(m, b, codebook_size=8, loss="clipped_ce", C=3.0)
    assert r.C == 3.0 and r.loss == "clipped_ce"
    assert 0.0 <= r.target_error <= 3.0


def test_audit_is_bit_identical_after_serialization(tmp_path, open_bundle):
    b = open_bundle
    m = init_rl_osheda(b.source.dim, b.target_unlabeled.dim, b.label_space, TrainConfig(lam=b.realized_lambda, seed=2))
    m.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    a1 = audit(m, b, codebook_size=8, seed=3)
    a2 = audit(back, b, codebook_size=8, seed=3)
    assert reports_to_json([a1]) == reports_to_json([a2])


def test_random_audit_configs():
    cfgs = random_audit_configs(5)
    assert len(cfgs) == 5 and cfgs[0].lambda_true == 1.0
    assert [c.seed for c in cfgs] == list(range(5))
    assert random_audit_configs(5) == cfgs


def test_audit_models_labels_and_order():
    cfg = SyntheticConfig(n_source=120, n_target_unlabeled=120, seed=3)
    reps = audit_models(cfg, TrainConfig(epochs=2, steps_per_epoch=2), models=("trained", "untrained"), codebook_size=8)
    assert [r.label for r in reps] == ["seed3/trained", "seed3/untrained"]
    with pytest.raises(InvalidConfigError):
        audit_models(cfg, models=("pretrained",))
