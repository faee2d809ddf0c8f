import math
from dataclasses import replace

import numpy as np
import pytest

from osheda import diffnet
from osheda.data import SyntheticConfig, generate_synthetic
from osheda.errors import InvalidConfigError, InvalidInputError, NumericError
from osheda.losses import Toggles, cross_entropy
from osheda.metrics import evaluate
from osheda.trainer import ABLATION_ROWS, TrainConfig, TrainedModel, run_ablation_grid, train_pl, train_rl_osheda, train_sl


@pytest.fixture(scope="module")
def bundle():
    return generate_synthetic(SyntheticConfig(n_source=160, n_target_unlabeled=160, seed=1))


@pytest.fixture(scope="module")
def cfg(bundle):
    return TrainConfig(lam=bundle.realized_lambda, epochs=4, repr_dim=16, batch_source=32, batch_target_unlabeled=32, seed=3)


def run(bundle, cfg, **kw):
    return train_rl_osheda(bundle.source, bundle.target_labeled, bundle.target_unlabeled, cfg, bundle.label_space, **kw)


def params_bytes(*nets):
    return b"".join(v.tobytes() for net in nets for p in net.params for v in p.values())


def test_training_is_deterministic(bundle, cfg):
    a, b = run(bundle, cfg), run(bundle, cfg)
    assert params_bytes(a.f_s, a.f_t, a.h) == params_bytes(b.f_s, b.f_t, b.h)
    assert [x.to_dict() for x in a.history] == [x.to_dict() for x in b.history]


def test_stage_boundary_and_total_identity(bundle, cfg):
    c = replace(cfg, epochs=6, stage_threshold=3)
    m = run(bundle, c)
    assert len(m.history) == 6
    for b in m.history[:3]:
        assert b.l_inv == b.l_seg == b.l_osd == 0.0
    assert any(b.l_seg > 0 for b in m.history[3:])
    for b in m.history:
        assert b.l_osd >= 0
        assert abs(b.total - (b.l_cls + b.l_inv - b.l_seg + b.l_osd)) <= 1e-12


def test_threshold_equal_to_epochs_is_pure_stage_one(bundle, cfg):
    m = run(bundle, replace(cfg, stage_threshold=cfg.epochs))
    assert all(b.total == b.l_cls for b in m.history)
    off = run(bundle, replace(cfg, stage_threshold=1, toggles=Toggles(False, False, False, True)))
    assert params_bytes(m.f_s, m.f_t, m.h) == params_bytes(off.f_s, off.f_t, off.h)


def test_two_stage_off_starts_stage_two_immediately(bundle, cfg):
    m = run(bundle, replace(cfg, toggles=Toggles(True, True, True, False)))
    assert m.history[0].l_seg > 0


def test_threshold_default_and_validation():
    assert TrainConfig(epochs=30).threshold == 15
    assert TrainConfig(epochs=1).threshold == 1
    for bad in (dict(stage_threshold=0), dict(epochs=3, stage_threshold=4), dict(lam=1.5), dict(method="svm"), dict(optimizer="rmsprop")):
        with pytest.raises(InvalidConfigError):
            TrainConfig(**bad)


def test_config_dict_roundtrip():
    c = TrainConfig(lam=0.4, toggles=Toggles(align=False), method="pl", seed=9)
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert TrainConfig.from_dict({"lambda": 0.25}).lam == 0.25
    with pytest.raises(InvalidConfigError):
        TrainConfig.from_dict({"bogus": 1})


def _reference_joint_ce(bundle, cfg):
    """Hand-rolled target-only CE training that consumes the same RNG streams as the trainer."""
    f_t = diffnet.build_representation_mapping(bundle.target_labeled.dim, cfg.repr_dim, np.random.default_rng([cfg.seed, 2]))
    h = diffnet.build_classifier(cfg.repr_dim, bundle.label_space.n_total, np.random.default_rng([cfg.seed, 3]))
    x, y = bundle.target_labeled.features, bundle.target_labeled.labels
    rng = np.random.default_rng([cfg.seed, 12])
    batch = min(cfg.batch_target_labeled, x.shape[0])
    steps = max(math.ceil(bundle.source.n / min(cfg.batch_source, bundle.source.n)),
                math.ceil(x.shape[0] / batch),
                math.ceil(bundle.target_unlabeled.n / min(cfg.batch_target_unlabeled, bundle.target_unlabeled.n)))
    order = list(rng.permutation(x.shape[0]))
    curve = []
    for _ in range(cfg.epochs):
        losses = []
        for _ in range(steps):
            while len(order) < batch:
                order += list(rng.permutation(x.shape[0]))
            idx, order = order[:batch], order[batch:]
            logits = h.forward(f_t.forward(x[idx]))
            value, g = cross_entropy(logits, y[idx])
            f_t.backward(h.backward(g))
            diffnet.sgd_step(f_t, cfg.learning_rate)
            diffnet.sgd_step(h, cfg.learning_rate)
            losses.append(value)
        curve.append(float(np.mean(losses)))
    return curve, f_t, h


def test_lambda_zero_matches_joint_ce_reference(bundle, cfg):
    c = replace(cfg, lam=0.0, epochs=5, toggles=Toggles(False, False, False, False))
    m = run(bundle, c)
    curve, f_t, h = _reference_joint_ce(bundle, c)
    np.testing.assert_allclose([b.total for b in m.history], curve, rtol=0, atol=1e-9)
    for a, b in zip(m.f_t.params + m.h.params, f_t.params + h.params):
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-9)


def test_rl_osheda_requires_source_and_unlabeled(bundle, cfg):
    with pytest.raises(InvalidInputError):
        train_rl_osheda(None, bundle.target_labeled, bundle.target_unlabeled, cfg, bundle.label_space)
    with pytest.raises(InvalidInputError):
        train_rl_osheda(bundle.source, bundle.target_labeled, None, cfg, bundle.label_space)


def test_labels_outside_known_classes_are_rejected(bundle, cfg):
    tl = bundle.target_labeled.with_labels(np.full(bundle.target_labeled.n, 4))
    with pytest.raises(InvalidInputError):
        train_rl_osheda(bundle.source, tl, bundle.target_unlabeled, cfg, bundle.label_space)


def test_target_dim_mismatch(bundle, cfg):
    with pytest.raises(InvalidInputError):
        train_rl_osheda(bundle.source, bundle.target_labeled, bundle.source, cfg, bundle.label_space)


def test_non_finite_loss_raises_numeric_error(bundle, cfg):
    with pytest.raises(NumericError) as err, np.errstate(all="ignore"):
        run(bundle, replace(cfg, learning_rate=1e308))
    assert err.value.epoch is not None


def test_model_shapes(bundle, cfg):
    m = run(bundle, cfg)
    assert m.h.in_dim == cfg.repr_dim and m.h.out_dim == bundle.label_space.n_known + 1


def test_model_dump_roundtrip(tmp_path, bundle, cfg):
    m = run(bundle, cfg)
    m.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    x = bundle.target_unlabeled.features
    np.testing.assert_array_equal(back.predict(x), m.predict(x))
    assert back.logits(x).tobytes() == m.logits(x).tobytes()
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_model_dump_version_is_checked(bundle, cfg):
    d = run(bundle, cfg).to_dict()
    d["format_version"] = 99
    with pytest.raises(InvalidInputError):
        TrainedModel.from_dict(d)


# ---------------------------------------------------------------- baselines


def test_sl_with_zero_rate_keeps_initialisation(bundle, cfg):
    a = train_sl(bundle.target_labeled, replace(cfg, epochs=1, learning_rate=0.0), bundle.label_space)
    init = diffnet.build_representation_mapping(bundle.target_labeled.dim, cfg.repr_dim, np.random.default_rng([cfg.seed, 2]))
    assert params_bytes(a.f_t) == params_bytes(init)
    assert a.f_s is None and a.h.out_dim == bundle.label_space.n_known


def test_sl_lambda_one_never_predicts_unknown(bundle, cfg):
    m = train_sl(bundle.target_labeled, replace(cfg, lam=1.0), bundle.label_space)
    r = evaluate(m, bundle.target_unlabeled, bundle.truth)
    assert r.unk == 0.0 and r.hos == 0.0


def test_sl_predictions_use_open_set_rule(bundle, cfg):
    m = train_sl(bundle.target_labeled, cfg, bundle.label_space)
    pred = m.predict(bundle.target_unlabeled.features)
    assert np.sum(pred == 4) == math.floor((1 - cfg.lam) * len(pred) + 1e-9)


def test_pl_without_unlabeled_data_matches_sl(bundle, cfg):
    sl = train_sl(bundle.target_labeled, cfg, bundle.label_space)
    pl = train_pl(bundle.target_labeled, None, cfg, bundle.label_space)
    assert params_bytes(sl.f_t, sl.h) == params_bytes(pl.f_t, pl.h)


def test_pl_with_full_warmup_matches_sl(bundle, cfg):
    c = replace(cfg, stage_threshold=cfg.epochs)
    sl = train_sl(bundle.target_labeled, c, bundle.label_space)
    pl = train_pl(bundle.target_labeled, bundle.target_unlabeled, c, bundle.label_space)
    assert params_bytes(sl.f_t, sl.h) == params_bytes(pl.f_t, pl.h)


def test_pl_self_training_changes_the_model(bundle, cfg):
    sl = train_sl(bundle.target_labeled, cfg, bundle.label_space)
    pl = train_pl(bundle.target_labeled, bundle.target_unlabeled, cfg, bundle.label_space)
    assert params_bytes(sl.f_t) != params_bytes(pl.f_t)


# ---------------------------------------------------------------- ablation grid


def test_single_row_grid_equals_one_run(bundle, cfg):
    (r,) = run_ablation_grid(bundle.source, bundle.target_labeled, bundle.target_unlabeled, bundle.truth, cfg, [Toggles()], bundle.label_space)
    assert r == evaluate(run(bundle, cfg), bundle.target_unlabeled, bundle.truth)


def test_six_rows_and_duplicates(bundle, cfg):
    c = replace(cfg, epochs=2)
    reps = run_ablation_grid(bundle.source, bundle.target_labeled, bundle.target_unlabeled, bundle.truth, c, ABLATION_ROWS, bundle.label_space)
    assert len(reps) == 6
    dup = run_ablation_grid(bundle.source, bundle.target_labeled, bundle.target_unlabeled, bundle.truth, c, [Toggles(), Toggles()], bundle.label_space)
    assert dup[0] == dup[1] == reps[0]
