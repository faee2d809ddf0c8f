"""Numerical audit of the open-set learning bounds on synthetic data.

Population quantities are replaced by sample estimates: errors are empirical
means, and JS divergences are plug-in estimates on a shared k-means codebook
fitted to the representations being compared.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.cluster import KMeans

from . import pseudo
from .data import FeatureDataset, SyntheticBundle
from .errors import InvalidConfigError, InvalidInputError, UnsupportedInputError
from .losses import cross_entropy_rows

LOSSES = ("zero_one", "clipped_ce")
LN2 = math.log(2.0)


def empirical_error(model, dataset, loss="zero_one", C=1.0):
    """Mean loss of ``model`` on a labeled dataset (routed by its domain tag).

    ``clipped_ce`` truncates the per-row cross-entropy at ``C`` so the loss
    is bounded; ``zero_one`` always has bound 1.
    """
    if dataset.labels is None:
        raise InvalidInputError("empirical_error needs ground-truth labels")
    if loss == "zero_one":
        pred = pseudo.predict(model.logits(dataset.features, dataset.domain))
        return float(np.mean(pred != dataset.labels))
    if loss == "clipped_ce":
        if C <= 0:
            raise InvalidConfigError("clipping constant C must be positive")
        ce, _ = cross_entropy_rows(model.logits(dataset.features, dataset.domain), dataset.labels)
        return float(np.mean(np.minimum(ce, C)))
    raise InvalidConfigError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def relabel_to_unknown(dataset, unknown_index):
    return dataset.with_labels(np.full(dataset.n, unknown_index, dtype=np.int64))


def open_set_difference(model, target_all, source, lam, loss="zero_one", C=1.0):
    """Er(target, all labels -> unk) - lam * Er(source, all labels -> unk); may be negative."""
    unk = model.label_space.unknown_index
    e_t = empirical_error(model, relabel_to_unknown(target_all, unk), loss, C)
    e_s = empirical_error(model, relabel_to_unknown(source, unk), loss, C)
    return e_t - lam * e_s


def discrete_js(p, q):
    """Jensen-Shannon divergence (natural log) between two histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), LN2)


def _canonical_union(a, b):
    # fit on a row-sorted union so swapping the arguments yields the same codebook
    union = np.concatenate([a, b])
    order = np.lexsort(union.T[::-1])
    return union[order]


def fit_codebook(a, b, codebook_size=32, seed=0, max_iter=50):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if codebook_size < 2:
        raise InvalidConfigError("codebook_size must be >= 2")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"sample matrices must share a dimension, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInputError("both sample sets must be non-empty")
    union = _canonical_union(a, b)
    k = min(codebook_size, np.unique(union, axis=0).shape[0])
    if k < 2:
        return None
    km = KMeans(n_clusters=k, n_init=1, max_iter=max_iter, random_state=seed)
    km.fit(union)
    return km


def _cells(km, x):
    if km is None:
        return np.zeros(x.shape[0], dtype=np.int64), 1
    return km.predict(x).astype(np.int64), km.n_clusters


def _smoothed_hist(idx, n_bins):
    n = idx.shape[0]
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    return (counts + 1.0 / n_bins) / (n + 1.0)


def estimate_js(samples_a, samples_b, codebook_size=32, seed=0):
    """Plug-in JS divergence between two samples via a shared k-means quantizer.

    Cell histograms get additive smoothing of 1/(n * codebook_size) before
    normalisation.
    """
    km = fit_codebook(samples_a, samples_b, codebook_size, seed)
    ia, n_bins = _cells(km, np.asarray(samples_a, dtype=np.float64))
    ib, _ = _cells(km, np.asarray(samples_b, dtype=np.float64))
    return discrete_js(_smoothed_hist(ia, n_bins), _smoothed_hist(ib, n_bins))


def estimate_js_joint(samples_a, labels_a, samples_b, labels_b, codebook_size=32, seed=0):
    """Plug-in JS divergence of (representation, label) pairs on cell x label bins."""
    la = np.asarray(labels_a)
    lb = np.asarray(labels_b)
    if la.shape[0] != len(samples_a) or lb.shape[0] != len(samples_b):
        raise InvalidInputError("labels must align with samples")
    km = fit_codebook(samples_a, samples_b, codebook_size, seed)
    ia, n_cells = _cells(km, np.asarray(samples_a, dtype=np.float64))
    ib, _ = _cells(km, np.asarray(samples_b, dtype=np.float64))
    values = np.unique(np.concatenate([la, lb]))
    ja = np.searchsorted(values, la)
    jb = np.searchsorted(values, lb)
    n_bins = n_cells * values.shape[0]
    return discrete_js(_smoothed_hist(ia * values.shape[0] + ja, n_bins), _smoothed_hist(ib * values.shape[0] + jb, n_bins))


def one_hot_js(pred, posterior):
    """Per-row JS between a one-hot distribution at ``pred`` and ``posterior``."""
    posterior = np.asarray(posterior, dtype=np.float64)
    rows = np.arange(posterior.shape[0])
    p_g = posterior[rows, pred]
    # KL(e_g || M) = log(2 / (1 + p_g)); KL(p || M) = p_g log(2 p_g / (1 + p_g)) + (1 - p_g) log 2
    with np.errstate(divide="ignore", invalid="ignore"):
        own = np.where(p_g > 0, p_g * np.log(2.0 * p_g / (1.0 + p_g)), 0.0)
    js = 0.5 * np.log(2.0 / (1.0 + p_g)) + 0.5 * (own + (1.0 - p_g) * LN2)
    return np.clip(js, 0.0, LN2)


def pseudo_labels_for(model, features, lam):
    """Full pseudo-label rule (known argmax, lowest (1 - lam) fraction -> unknown) over one batch."""
    logits = model.logits(features, "target")
    return pseudo.assign_open_set(logits[:, : model.label_space.n_known], lam).labels


def pseudo_label_noise(model, bundle, lam=None):
    """Mean JS between the pseudo-labeler's output and the Bayes posterior on known-class rows.

    The pseudo-label rule runs over the whole unlabeled target set as one
    batch. A known-class row that receives the unknown label has no overlap
    with the known-class posterior and contributes ln 2.
    """
    if not isinstance(bundle, SyntheticBundle):
        raise UnsupportedInputError("pseudo-label noise needs a synthetic bundle with latent codes")
    n_known = bundle.label_space.n_known
    known = bundle.truth < n_known
    if not known.any():
        return 0.0
    lam = model.config.lam if lam is None else lam
    g = pseudo_labels_for(model, bundle.target_unlabeled.features, lam)[known]
    posterior = bundle.known_posterior(bundle.latents["target_unlabeled"][known])
    js = np.full(g.shape[0], LN2)
    ok = g < n_known
    js[ok] = one_hot_js(g[ok], posterior[ok])
    return float(js.mean())


@dataclass
class BoundReport:
    target_error: float
    source_error: float
    target_known_error: float
    target_unknown_error: float
    source_unknown_error: float
    open_set_difference: float
    js_marginal: float
    js_joint: float
    js_joint_pseudo: float
    js_unknown_marginal: float
    lam: float
    C: float
    lhs: float
    rhs_upper: float
    rhs_lower: float
    holds_upper: bool
    holds_lower: bool
    tolerance: float
    loss: str = "zero_one"
    label: str = ""

    def to_dict(self):
        return asdict(self)


def audit(model, bundle, codebook_size=32, seed=0, loss="zero_one", C=1.0, tolerance=0.05, label=""):
    """Evaluate both sides of the upper and lower target-error bounds.

    Target-known and target-unknown splits come from generator ground truth.
    ``lam`` is the realised known fraction of the unlabeled target sample, so
    the empirical mixture identities hold exactly.
    """
    if not isinstance(bundle, SyntheticBundle):
        raise UnsupportedInputError("bound audits need synthetic data with full ground truth")
    if loss == "zero_one":
        C = 1.0
    ls = bundle.label_space
    unk = ls.unknown_index
    lam = bundle.realized_lambda
    target_all = bundle.target_all()
    source = bundle.source
    known = target_all.labels != unk

    target_error = empirical_error(model, target_all, loss, C)
    source_error = empirical_error(model, source, loss, C)
    osd = open_set_difference(model, target_all, source, lam, loss, C)
    tk = FeatureDataset(target_all.features[known], target_all.labels[known], "target") if known.any() else None
    tu = FeatureDataset(target_all.features[~known], target_all.labels[~known], "target") if (~known).any() else None
    tk_err = empirical_error(model, tk, loss, C) if tk else 0.0
    tu_err = empirical_error(model, tu, loss, C) if tu else 0.0
    su_err = empirical_error(model, relabel_to_unknown(source, unk), loss, C)

    z_s = model.representations(source.features, "source")
    if tk is not None:
        z_tk = model.representations(tk.features, "target")
        js_m = estimate_js(z_s, z_tk, codebook_size, seed)
        js_j = estimate_js_joint(z_s, source.labels, z_tk, tk.labels, codebook_size, seed)
        g = pseudo_labels_for(model, target_all.features, lam)[known]
        js_jp = estimate_js_joint(z_s, source.labels, z_tk, g, codebook_size, seed)
    else:
        js_m = js_j = js_jp = 0.0
    if tu is not None:
        js_u = estimate_js(z_s, model.representations(tu.features, "target"), codebook_size, seed)
    else:
        js_u = 0.0

    rhs_upper = lam * source_error + osd + math.sqrt(2.0) * lam * C * (math.sqrt(js_m) + math.sqrt(js_j))
    rhs_lower = lam * tk_err + (1.0 - lam) * su_err - math.sqrt(2.0) * (1.0 - lam) * C * math.sqrt(js_u)
    return BoundReport(
        target_error=target_error,
        source_error=source_error,
        target_known_error=tk_err,
        target_unknown_error=tu_err,
        source_unknown_error=su_err,
        open_set_difference=osd,
        js_marginal=js_m,
        js_joint=js_j,
        js_joint_pseudo=js_jp,
        js_unknown_marginal=js_u,
        lam=lam,
        C=C,
        lhs=target_error,
        rhs_upper=rhs_upper,
        rhs_lower=rhs_lower,
        holds_upper=bool(target_error <= rhs_upper + tolerance),
        holds_lower=bool(target_error >= rhs_lower - tolerance),
        tolerance=tolerance,
        loss=loss,
        label=label,
    )


def audit_theorem1(model, bundle, codebook_size=32, **kw):
    """Upper bound: source error + open-set difference + domain distance."""
    return audit(model, bundle, codebook_size, **kw)


def audit_lower_bound(model, bundle, codebook_size=32, **kw):
    """Lower bound driven by the source-vs-target-unknown representation distance."""
    return audit(model, bundle, codebook_size, **kw)


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


def noise_trend(bundle, cfg):
    """Train on ``bundle`` and record the pseudo-label noise across epochs.

    ``trace[e - 1]`` is the noise of the pseudo-labeler in force when epoch
    ``e`` starts; ``final`` is measured on the trained model. ``stage2_start``
    is the trace entry for the first stage-2 epoch.
    """
    from .trainer import train_rl_osheda

    trace = []
    model = train_rl_osheda(
        bundle.source, bundle.target_labeled, bundle.target_unlabeled, cfg, bundle.label_space,
        on_epoch_start=lambda epoch, m: trace.append(pseudo_label_noise(m, bundle)),
    )
    first = 1 if not cfg.toggles.two_stage else cfg.threshold + 1
    start = trace[first - 1] if first <= len(trace) else None
    return {"trace": trace, "stage2_start": start, "final": pseudo_label_noise(model, bundle), "model": model}


def random_audit_configs(n_configs=20, root_seed=123, n_samples=600):
    """Random small synthetic tasks for bound sweeps; the first is closed-set (lambda = 1)."""
    from .data import SyntheticConfig

    rng = np.random.default_rng(root_seed)
    out = []
    for i in range(n_configs):
        n_known = int(rng.integers(2, 6))
        n_novel = int(rng.integers(1, 4))
        lam = float(rng.choice([1.0, rng.uniform(0.3, 0.95)])) if i else 1.0
        out.append(SyntheticConfig(
            latent_dim=int(rng.integers(4, 10)),
            d_source=int(rng.integers(8, 30)),
            d_target=int(rng.integers(8, 30)),
            n_known=n_known,
            n_novel=n_novel,
            lambda_true=lam,
            n_source=n_samples,
            n_target_unlabeled=n_samples,
            noise_std=float(rng.uniform(0.3, 0.6)),
            seed=i,
        ))
    return out


def audit_models(syn_cfg, train_cfg=None, models=("untrained", "trained"), codebook_size=32, loss="zero_one", C=1.0, tolerance=0.05):
    """Audit freshly initialised and/or trained models on one synthetic task, in ``models`` order."""
    from .data import generate_synthetic
    from .trainer import TrainConfig, init_rl_osheda, train_rl_osheda

    bad = set(models) - {"untrained", "trained"}
    if bad or not models:
        raise InvalidConfigError(f"models must be drawn from 'untrained' and 'trained', got {list(models)}")
    bundle = generate_synthetic(syn_cfg)
    if train_cfg is None:
        train_cfg = TrainConfig(epochs=20, steps_per_epoch=16)
    cfg = replace(train_cfg, lam=bundle.realized_lambda, seed=syn_cfg.seed)
    kw = dict(codebook_size=codebook_size, seed=syn_cfg.seed, loss=loss, C=C, tolerance=tolerance)
    out = []
    for name in models:
        if name == "untrained":
            model = init_rl_osheda(syn_cfg.d_source, syn_cfg.d_target, bundle.label_space, cfg)
        else:
            model = train_rl_osheda(bundle.source, bundle.target_labeled, bundle.target_unlabeled, cfg, bundle.label_space)
        out.append(audit(model, bundle, label=f"seed{syn_cfg.seed}/{name}", **kw))
    return out
