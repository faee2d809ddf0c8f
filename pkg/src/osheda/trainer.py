"""Two-stage training of the open-set heterogeneous model and its baselines."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffnet, pseudo
from .data import FeatureDataset, LabelSpace
from .errors import InvalidConfigError, InvalidInputError, NumericError
from .losses import LossBreakdown, StepTensors, Toggles, cross_entropy, total_loss

log = logging.getLogger(__name__)

METHODS = ("rl_osheda", "sl", "pl")
MODEL_FORMAT_VERSION = 1

# fixed RNG stream tags so every method draws identical inits and batches for shared parts
_TAG_FS, _TAG_FT, _TAG_H = 1, 2, 3
_TAG_SRC, _TAG_TL, _TAG_TU = 11, 12, 13


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 2 / 3
    epochs: int = 30
    stage_threshold: int | None = None
    batch_source: int = 64
    batch_target_labeled: int = 20
    batch_target_unlabeled: int = 64
    learning_rate: float = 0.1
    repr_dim: int = 256
    toggles: Toggles = Toggles()
    method: str = "rl_osheda"
    seed: int = 0
    optimizer: str = "sgd"
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise InvalidConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if not 1 <= self.threshold <= self.epochs:
            raise InvalidConfigError(f"stage threshold must lie in [1, {self.epochs}], got {self.threshold}")
        if min(self.batch_source, self.batch_target_labeled, self.batch_target_unlabeled) < 1:
            raise InvalidConfigError("batch sizes must be >= 1")
        if self.learning_rate < 0:
            raise InvalidConfigError("learning_rate must be non-negative")
        if self.repr_dim < 1:
            raise InvalidConfigError("repr_dim must be >= 1")
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfigError("steps_per_epoch must be >= 1")

    @property
    def threshold(self):
        if self.stage_threshold is None:
            return max(1, self.epochs // 2)
        return self.stage_threshold

    def to_dict(self):
        d = asdict(self)
        d["toggles"] = self.toggles.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfigError(f"unknown train config keys: {sorted(extra)}")
        try:
            if isinstance(d.get("toggles"), dict):
                d["toggles"] = Toggles(**d["toggles"])
            return cls(**d)
        except TypeError as e:
            # wrong value types (e.g. a YAML string where a number belongs) or unknown toggle names
            raise InvalidConfigError(f"bad train config value: {e}") from None


class _Stream:
    """Endless shuffled minibatches; reshuffles on every pass."""

    def __init__(self, dataset, batch_size, rng):
        self.x = dataset.features
        self.y = dataset.labels
        self.batch = min(batch_size, dataset.n)
        self.rng = rng
        self.order = rng.permutation(dataset.n)
        self.pos = 0

    @property
    def steps_per_pass(self):
        return math.ceil(self.x.shape[0] / self.batch)

    def next(self):
        if self.pos + self.batch > self.order.shape[0]:
            rest = self.order[self.pos :]
            self.order = self.rng.permutation(self.x.shape[0])
            take = self.batch - rest.shape[0]
            idx = np.concatenate([rest, self.order[:take]])
            self.pos = take
        else:
            idx = self.order[self.pos : self.pos + self.batch]
            self.pos += self.batch
        return self.x[idx], (None if self.y is None else self.y[idx])


def _rng(seed, tag):
    return np.random.default_rng([seed, tag])


@dataclass(eq=False)
class TrainedModel:
    f_t: diffnet.Network
    h: diffnet.Network
    label_space: LabelSpace
    config: TrainConfig
    f_s: diffnet.Network | None = None
    history: list = field(default_factory=list)

    @property
    def method(self):
        return self.config.method

    def encoder(self, domain):
        if domain == "source":
            if self.f_s is None:
                raise InvalidInputError(f"a {self.method} model has no source mapping")
            return self.f_s
        return self.f_t

    def representations(self, features, domain="target"):
        return self.encoder(domain).forward(features)

    def logits(self, features, domain="target"):
        return self.h.forward(self.representations(features, domain))

    def predict(self, features, domain="target"):
        """Class indices with the unknown class at ``label_space.unknown_index``."""
        logits = self.logits(features, domain)
        if self.method == "rl_osheda":
            return pseudo.predict(logits)
        # baselines have no unknown output; reuse the pseudo-label rule at inference
        return pseudo.assign_open_set(logits, self.config.lam).labels

    def to_dict(self):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "method": self.method,
            "n_known": self.label_space.n_known,
            "config": self.config.to_dict(),
            "f_s": None if self.f_s is None else self.f_s.to_dict(),
            "f_t": self.f_t.to_dict(),
            "h": self.h.to_dict(),
            "history": [b.to_dict() for b in self.history],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise InvalidInputError(f"unsupported model format version {d.get('format_version')!r}")
        return cls(
            f_t=diffnet.Network.from_dict(d["f_t"]),
            h=diffnet.Network.from_dict(d["h"]),
            label_space=LabelSpace(d["n_known"]),
            config=TrainConfig.from_dict(d["config"]),
            f_s=None if d["f_s"] is None else diffnet.Network.from_dict(d["f_s"]),
            history=[LossBreakdown(**b) for b in d["history"]],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _make_optimizer(nets, cfg):
    if cfg.optimizer == "adam":
        adam = diffnet.Adam(nets, cfg.learning_rate)
        return adam.step

    def step():
        for net in nets:
            diffnet.sgd_step(net, cfg.learning_rate)

    return step


def _check_labeled(ds, what, n_known):
    if ds is None or ds.labels is None:
        raise InvalidInputError(f"{what} must be labeled")
    if ds.labels.max() >= n_known:
        raise InvalidInputError(f"{what} contains labels outside the {n_known} known classes")


def _mean_breakdown(items):
    if not items:
        return LossBreakdown()
    return LossBreakdown(*(float(np.mean([getattr(b, k) for b in items])) for k in ("l_cls", "l_inv", "l_seg", "l_osd", "total")))


def _infer_label_space(label_space, *datasets):
    if label_space is not None:
        return label_space
    top = max(int(ds.labels.max()) for ds in datasets if ds is not None and ds.labels is not None)
    return LabelSpace(max(2, top + 1))


def init_rl_osheda(source_dim, target_dim, label_space, cfg):
    """Freshly initialised (untrained) source/target mappings and classifier."""
    return TrainedModel(
        f_s=diffnet.build_representation_mapping(source_dim, cfg.repr_dim, _rng(cfg.seed, _TAG_FS)),
        f_t=diffnet.build_representation_mapping(target_dim, cfg.repr_dim, _rng(cfg.seed, _TAG_FT)),
        h=diffnet.build_classifier(cfg.repr_dim, label_space.n_total, _rng(cfg.seed, _TAG_H)),
        label_space=label_space,
        config=replace(cfg, method="rl_osheda"),
    )


def train_rl_osheda(source, target_labeled, target_unlabeled, cfg, label_space=None, on_epoch_end=None, on_epoch_start=None):
    """Two-stage training of source/target mappings and a shared classifier.

    The first ``cfg.threshold`` epochs minimise the classification term only;
    later epochs pseudo-label each unlabeled minibatch and minimise the full
    objective (subject to ``cfg.toggles``). ``on_epoch_start(epoch, model)``
    and ``on_epoch_end(epoch, model)`` bracket every epoch, counted from 1.
    """
    if source is None:
        raise InvalidInputError("rl_osheda needs a source dataset")
    if target_unlabeled is None:
        raise InvalidInputError("rl_osheda needs an unlabeled target dataset")
    label_space = _infer_label_space(label_space, source, target_labeled)
    _check_labeled(source, "source", label_space.n_known)
    _check_labeled(target_labeled, "target_labeled", label_space.n_known)
    if target_labeled.dim != target_unlabeled.dim:
        raise InvalidInputError(f"target dims differ: {target_labeled.dim} vs {target_unlabeled.dim}")
    cfg = replace(cfg, method="rl_osheda")
    unk = label_space.unknown_index

    model = init_rl_osheda(source.dim, target_labeled.dim, label_space, cfg)
    nets = [model.f_s, model.f_t, model.h]
    step = _make_optimizer(nets, cfg)
    s_src = _Stream(source, cfg.batch_source, _rng(cfg.seed, _TAG_SRC))
    s_tl = _Stream(target_labeled, cfg.batch_target_labeled, _rng(cfg.seed, _TAG_TL))
    s_tu = _Stream(target_unlabeled, cfg.batch_target_unlabeled, _rng(cfg.seed, _TAG_TU))
    n_steps = cfg.steps_per_epoch or max(s.steps_per_pass for s in (s_src, s_tl, s_tu))
    toggles = cfg.toggles
    if toggles.needs_pseudo_labels:
        log.info("pseudo-labels use lambda=%.4f", cfg.lam)

    for epoch in range(1, cfg.epochs + 1):
        stage2 = (not toggles.two_stage) or epoch > cfg.threshold
        use_tu = stage2 and (toggles.needs_pseudo_labels or toggles.osd)
        if on_epoch_start is not None:
            on_epoch_start(epoch, model)
        records = []
        for _ in range(n_steps):
            xs, ys = s_src.next()
            xl, yl = s_tl.next()
            xu, _ = s_tu.next()
            n_s, n_l = xs.shape[0], xl.shape[0]
            zs = model.f_s.forward(xs)
            zt = model.f_t.forward(np.concatenate([xl, xu]) if use_tu else xl)
            logits = model.h.forward(np.concatenate([zs, zt]))
            t = StepTensors(
                src_logits=logits[:n_s], src_reprs=zs, src_labels=ys,
                tl_logits=logits[n_s : n_s + n_l], tl_reprs=zt[:n_l], tl_labels=yl,
                tu_logits=logits[n_s + n_l :], tu_reprs=zt[n_l:],
            )
            if stage2 and toggles.needs_pseudo_labels:
                t.tu_pseudo = pseudo.pseudo_label(t.tu_logits, cfg.lam, unk).labels
            b = total_loss(t, cfg.lam, unk, toggles, stage2)
            if not math.isfinite(b.total):
                raise NumericError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            g = t.grads
            d_logits = np.concatenate([g["src_logits"], g["tl_logits"], g["tu_logits"]])
            d_z = model.h.backward(d_logits)
            d_z[:n_s] += g["src_reprs"]
            d_z[n_s : n_s + n_l] += g["tl_reprs"]
            d_z[n_s + n_l :] += g["tu_reprs"]
            model.f_s.backward(d_z[:n_s])
            model.f_t.backward(d_z[n_s:])
            try:
                step()
            except NumericError as e:
                raise NumericError(f"{e} at epoch {epoch}", layer=e.layer, epoch=epoch) from None
            records.append(b)
        model.history.append(_mean_breakdown(records))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return model


def _target_only_model(target_labeled, cfg, label_space):
    return TrainedModel(
        f_t=diffnet.build_representation_mapping(target_labeled.dim, cfg.repr_dim, _rng(cfg.seed, _TAG_FT)),
        h=diffnet.build_classifier(cfg.repr_dim, label_space.n_known, _rng(cfg.seed, _TAG_H)),
        label_space=label_space,
        config=cfg,
    )


def _train_target_only(target_labeled, target_unlabeled, cfg, label_space, on_epoch_end):
    _check_labeled(target_labeled, "target_labeled", label_space.n_known)
    if target_unlabeled is not None and target_unlabeled.dim != target_labeled.dim:
        raise InvalidInputError(f"target dims differ: {target_labeled.dim} vs {target_unlabeled.dim}")
    model = _target_only_model(target_labeled, cfg, label_space)
    nets = [model.f_t, model.h]
    step = _make_optimizer(nets, cfg)
    s_tl = _Stream(target_labeled, cfg.batch_target_labeled, _rng(cfg.seed, _TAG_TL))
    s_tu = None
    if cfg.method == "pl" and target_unlabeled is not None:
        s_tu = _Stream(target_unlabeled, cfg.batch_target_unlabeled, _rng(cfg.seed, _TAG_TU))
    n_known = label_space.n_known

    for epoch in range(1, cfg.epochs + 1):
        use_tu = s_tu is not None and epoch > cfg.threshold
        if cfg.steps_per_epoch:
            n_steps = cfg.steps_per_epoch
        else:
            n_steps = max(s.steps_per_pass for s in ((s_tl, s_tu) if use_tu else (s_tl,)))
        records = []
        for _ in range(n_steps):
            xl, yl = s_tl.next()
            n_l = xl.shape[0]
            if use_tu:
                xu, _ = s_tu.next()
                logits = model.h.forward(model.f_t.forward(np.concatenate([xl, xu])))
            else:
                logits = model.h.forward(model.f_t.forward(xl))
            value, g_l = cross_entropy(logits[:n_l], yl)
            d_logits = np.zeros_like(logits)
            d_logits[:n_l] = g_l
            if use_tu:
                lab = pseudo.assign_open_set(logits[n_l:], cfg.lam).labels
                keep = np.flatnonzero(lab != n_known)
                if keep.size:
                    v_u, g_u = cross_entropy(logits[n_l:][keep], lab[keep])
                    value += v_u
                    d_logits[n_l + keep] = g_u
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            model.f_t.backward(model.h.backward(d_logits))
            step()
            records.append(LossBreakdown(l_cls=value, total=value))
        model.history.append(_mean_breakdown(records))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return model


def train_sl(target_labeled, cfg, label_space=None, on_epoch_end=None):
    """Supervised baseline on labeled target data; unknowns come from the inference rule."""
    label_space = _infer_label_space(label_space, target_labeled)
    return _train_target_only(target_labeled, None, replace(cfg, method="sl"), label_space, on_epoch_end)


def train_pl(target_labeled, target_unlabeled, cfg, label_space=None, on_epoch_end=None):
    """Pseudo-labeling baseline: supervised warm-up, then self-training on pseudo-known rows."""
    label_space = _infer_label_space(label_space, target_labeled)
    return _train_target_only(target_labeled, target_unlabeled, replace(cfg, method="pl"), label_space, on_epoch_end)


def train(method, source, target_labeled, target_unlabeled, cfg, label_space=None, on_epoch_end=None):
    if method == "rl_osheda":
        return train_rl_osheda(source, target_labeled, target_unlabeled, cfg, label_space, on_epoch_end)
    if method == "sl":
        return train_sl(target_labeled, cfg, label_space, on_epoch_end)
    if method == "pl":
        return train_pl(target_labeled, target_unlabeled, cfg, label_space, on_epoch_end)
    raise InvalidConfigError(f"unknown method {method!r}")


ABLATION_ROWS = (
    Toggles(True, True, True, True),
    Toggles(True, True, True, False),
    Toggles(True, False, True, True),
    Toggles(False, True, True, True),
    Toggles(True, True, False, True),
    Toggles(False, False, False, False),
)


def run_ablation_grid(source, target_labeled, target_unlabeled, truth, cfg, rows=ABLATION_ROWS, label_space=None):
    """Train and evaluate one model per toggle row, all with ``cfg.seed``."""
    from .metrics import evaluate

    reports = []
    for toggles in rows:
        model = train_rl_osheda(source, target_labeled, target_unlabeled, replace(cfg, toggles=toggles), label_space)
        reports.append(evaluate(model, target_unlabeled, truth))
    return reports
