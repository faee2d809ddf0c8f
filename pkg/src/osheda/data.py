"""Datasets, CSV ingestion, the synthetic open-set benchmark and prior estimation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidConfigError, InvalidInputError, ParseError

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class LabelSpace:
    n_known: int

    def __post_init__(self):
        if self.n_known < 1:
            raise InvalidConfigError("need at least one known class")

    @property
    def n_total(self):
        return self.n_known + 1

    @property
    def unknown_index(self):
        return self.n_known

    def collapse(self, labels):
        """Map every novel class (index >= n_known) onto the unknown index."""
        labels = np.asarray(labels, dtype=np.int64)
        return np.where(labels >= self.n_known, self.n_known, labels)


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    domain: str = "target"
    name: str = ""

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidInputError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError(f"dataset {self.name!r} has non-finite features")
        if self.domain not in DOMAINS:
            raise InvalidInputError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        x.flags.writeable = False
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise InvalidInputError(f"{y.shape[0]} labels for {x.shape[0]} rows")
            if y.size and y.min() < 0:
                raise InvalidInputError("labels must be non-negative class indices")
            y.flags.writeable = False
            object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def with_labels(self, labels):
        return FeatureDataset(self.features, labels, self.domain, self.name)


def load_csv(path, has_labels=True, domain="target", name=None):
    """Read a dataset written as comma-separated decimals.

    Lines starting with ``#`` are comments. With ``has_labels`` the last
    column holds integer class indices, ``-1`` meaning unlabeled; a file
    must be either fully labeled or fully unlabeled.
    """
    path = Path(path)
    rows = []
    line_nos = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            if rows and len(row) != len(rows[0]):
                raise ParseError(f"expected {len(rows[0])} columns, found {len(row)}", line_no)
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"non-numeric cell in {row!r}", line_no) from None
            line_nos.append(line_no)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise ParseError("non-finite value", line_nos[bad])
    labels = None
    if has_labels:
        if data.shape[1] < 2:
            raise ParseError(f"{path}: a labeled file needs at least one feature column", line_nos[0])
        raw = data[:, -1]
        data = data[:, :-1]
        for i, v in enumerate(raw):
            if v != math.floor(v) or v < -1:
                raise ParseError(f"label {v!r} is not a class index or -1", line_nos[i])
        unlabeled = raw == -1
        if unlabeled.all():
            labels = None
        elif unlabeled.any():
            raise ParseError("mixed -1 and class labels", line_nos[int(np.argmax(unlabeled))])
        else:
            labels = raw.astype(np.int64)
    return FeatureDataset(data, labels, domain, name or path.stem)


def _fmt(v):
    return repr(float(v))


def save_csv(dataset, path, include_labels=True):
    """Write ``dataset`` in the format read by :func:`load_csv`.

    Unlabeled datasets get a ``-1`` label column when ``include_labels`` is set.
    """
    path = Path(path)
    cols = [f"x{i}" for i in range(dataset.dim)]
    if include_labels:
        cols.append("label")
    with open(path, "w", newline="") as fh:
        fh.write("# " + ",".join(cols) + "\n")
        for i in range(dataset.n):
            cells = [_fmt(v) for v in dataset.features[i]]
            if include_labels:
                cells.append(str(int(dataset.labels[i])) if dataset.labels is not None else "-1")
            fh.write(",".join(cells) + "\n")


def save_labels(labels, path):
    with open(path, "w") as fh:
        fh.write("# label\n")
        for v in labels:
            fh.write(f"{int(v)}\n")


def load_labels(path):
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise ParseError(f"bad label {s!r}", line_no) from None
    return np.asarray(out, dtype=np.int64)


@dataclass(frozen=True)
class SyntheticConfig:
    latent_dim: int = 8
    d_source: int = 20
    d_target: int = 30
    n_known: int = 4
    n_novel: int = 2
    lambda_true: float = 2 / 3
    n_source: int = 2000
    n_target_labeled_per_class: int = 5
    n_target_unlabeled: int = 2000
    noise_std: float = 0.5
    seed: int = 0
    # scale of class means in latent space and of the additive feature noise
    mean_scale: float = 1.0
    feature_noise_std: float = 0.1

    def __post_init__(self):
        if self.n_known < 2:
            raise InvalidConfigError("n_known must be >= 2")
        if self.n_novel < 1:
            raise InvalidConfigError("n_novel must be >= 1")
        if not 0 < self.lambda_true <= 1:
            raise InvalidConfigError("lambda_true must lie in (0, 1]")
        for name in ("latent_dim", "d_source", "d_target", "n_source", "n_target_labeled_per_class", "n_target_unlabeled"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.noise_std <= 0 or self.mean_scale <= 0 or self.feature_noise_std < 0:
            raise InvalidConfigError("noise_std and mean_scale must be positive, feature_noise_std non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfigError(f"unknown synthetic config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidConfigError(f"bad synthetic config value: {e}") from None

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class SyntheticBundle:
    """Everything :func:`generate_synthetic` produces.

    ``truth`` holds raw class ids for the unlabeled target rows (novel
    classes keep their own ids); ``label_space.collapse`` maps them to the
    single unknown index. Latent codes are kept for posterior computations.
    """

    source: FeatureDataset
    target_labeled: FeatureDataset
    target_unlabeled: FeatureDataset
    truth: np.ndarray
    label_space: LabelSpace
    config: SyntheticConfig
    class_means: np.ndarray
    latents: dict = field(default_factory=dict)

    @property
    def truth_collapsed(self):
        return self.label_space.collapse(self.truth)

    @property
    def realized_lambda(self):
        return float(np.mean(self.truth < self.label_space.n_known))

    def target_all(self):
        """Unlabeled target rows with their collapsed ground truth attached."""
        return self.target_unlabeled.with_labels(self.truth_collapsed)

    def known_posterior(self, latents):
        """Bayes posterior over known classes given latent codes (equal priors)."""
        mu = self.class_means[: self.label_space.n_known]
        d2 = ((latents[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
        logits = -d2 / (2.0 * self.config.noise_std**2)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def _draw_means(rng, n_classes, cfg):
    min_gap = 2.0 * cfg.noise_std
    for _ in range(10_000):
        mu = rng.normal(0.0, cfg.mean_scale, size=(n_classes, cfg.latent_dim))
        gaps = cdist(mu, mu)[np.triu_indices(n_classes, 1)]
        if gaps.min() >= min_gap:
            return mu
    raise InvalidConfigError("could not place class means with the required separation; lower noise_std")


def _balanced(n, n_classes, offset, rng):
    labels = offset + np.arange(n) % n_classes
    return rng.permutation(labels)


def generate_synthetic(cfg):
    """Draw a heterogeneous open-set task from a shared Gaussian latent model.

    Classes are isotropic Gaussians in a latent space. Source rows are a
    linear view of the latent code, target rows a tanh-warped linear view,
    both with additive feature noise. Novel classes appear only in the
    unlabeled target set, whose known fraction is ``round(lambda * n) / n``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.n_known + cfg.n_novel
    mu = _draw_means(rng, n_classes, cfg)
    A_s = rng.normal(0.0, 1.0 / math.sqrt(cfg.latent_dim), size=(cfg.latent_dim, cfg.d_source))
    A_t = rng.normal(0.0, 1.0 / math.sqrt(cfg.latent_dim), size=(cfg.latent_dim, cfg.d_target))

    def latent(labels):
        return mu[labels] + cfg.noise_std * rng.normal(size=(labels.shape[0], cfg.latent_dim))

    def source_view(z):
        return z @ A_s + cfg.feature_noise_std * rng.normal(size=(z.shape[0], cfg.d_source))

    def target_view(z):
        return np.tanh(z @ A_t) + cfg.feature_noise_std * rng.normal(size=(z.shape[0], cfg.d_target))

    y_s = _balanced(cfg.n_source, cfg.n_known, 0, rng)
    z_s = latent(y_s)
    x_s = source_view(z_s)

    y_tl = np.repeat(np.arange(cfg.n_known), cfg.n_target_labeled_per_class)
    z_tl = latent(y_tl)
    x_tl = target_view(z_tl)

    n_u = cfg.n_target_unlabeled
    n_known_u = int(round(cfg.lambda_true * n_u))
    y_u = np.concatenate([
        np.arange(n_known_u) % cfg.n_known,
        cfg.n_known + np.arange(n_u - n_known_u) % cfg.n_novel,
    ])
    y_u = rng.permutation(y_u)
    z_u = latent(y_u)
    x_u = target_view(z_u)

    return SyntheticBundle(
        source=FeatureDataset(x_s, y_s, "source", "source"),
        target_labeled=FeatureDataset(x_tl, y_tl, "target", "target_labeled"),
        target_unlabeled=FeatureDataset(x_u, None, "target", "target_unlabeled"),
        truth=y_u,
        label_space=LabelSpace(cfg.n_known),
        config=cfg,
        class_means=mu,
        latents={"source": z_s, "target_labeled": z_tl, "target_unlabeled": z_u},
    )


def _kth_smallest(d, k):
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def estimate_lambda(target_labeled, target_unlabeled, k=1, alpha=0.05, floor=0.05):
    """Known-class prior of the unlabeled target set from k-NN distances.

    The known radius is the (1 - alpha) quantile of leave-one-out k-NN
    distances inside the labeled set. The estimate is the largest fraction q
    whose q-quantile of unlabeled-to-labeled k-NN distances stays within that
    radius, clamped to [floor, 1].
    """
    L = target_labeled.features
    U = target_unlabeled.features
    if L.shape[1] != U.shape[1]:
        raise InvalidInputError(f"feature dims differ: {L.shape[1]} vs {U.shape[1]}")
    if k < 1 or k >= L.shape[0]:
        raise InvalidConfigError(f"k must be in [1, {L.shape[0] - 1}], got {k}")
    d_ll = cdist(L, L)
    np.fill_diagonal(d_ll, np.inf)
    radius = np.quantile(_kth_smallest(d_ll, k), 1.0 - alpha)
    d_u = np.sort(_kth_smallest(cdist(U, L), k))
    n = d_u.shape[0]
    # largest q with inverted-CDF quantile(q) <= radius
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if d_u[mid - 1] <= radius:
            lo = mid
        else:
            hi = mid - 1
    return float(min(1.0, max(floor, lo / n)))
