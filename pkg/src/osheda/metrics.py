"""Open-set scores (OS*, UNK, HOS), seed aggregation and rank-based significance tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import InvalidInputError

# Nemenyi critical values q_alpha (studentized range / sqrt(2), infinite df), k = 2..20
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219,
           3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978,
           3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319),
}


@dataclass
class EvalReport:
    os_star: float
    unk: float
    hos: float
    confusion: list
    n_eval: int
    seed: int = 0
    unk_defined: bool = True
    method: str = ""
    lam: float | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def hos(os_star, unk):
    s = os_star + unk
    return 2.0 * os_star * unk / s if s > 0 else 0.0


def open_set_scores(pred, truth, n_known):
    """OS*, UNK, HOS (percentages), confusion matrix and whether UNK is defined.

    Known classes missing from ``truth`` are left out of the OS* mean. With
    no unknown rows in ``truth`` UNK is reported as 0 and flagged undefined.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"{pred.shape[0]} predictions for {truth.shape[0]} truth labels")
    n_cls = n_known + 1
    if truth.size and (truth.min() < 0 or truth.max() >= n_cls or pred.min() < 0 or pred.max() >= n_cls):
        raise InvalidInputError(f"labels must lie in [0, {n_known}]")
    confusion = np.bincount(truth * n_cls + pred, minlength=n_cls * n_cls).reshape(n_cls, n_cls)
    support = confusion.sum(axis=1)
    hits = np.diag(confusion)
    present = np.flatnonzero(support[:n_known])
    os_star = float(np.mean(hits[present] / support[present])) * 100.0 if present.size else 0.0
    unk_defined = bool(support[n_known] > 0)
    unk = float(hits[n_known] / support[n_known]) * 100.0 if unk_defined else 0.0
    return os_star, unk, hos(os_star, unk), confusion, unk_defined


def evaluate(model, dataset, truth, seed=None):
    """Score ``model`` on ``dataset`` against ``truth`` (novel classes may be raw ids)."""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape[0] != dataset.n:
        raise InvalidInputError(f"{truth.shape[0]} truth labels for {dataset.n} rows")
    truth = model.label_space.collapse(truth)
    pred = model.predict(dataset.features, dataset.domain)
    os_star, unk, h, confusion, defined = open_set_scores(pred, truth, model.label_space.n_known)
    return EvalReport(
        os_star=os_star,
        unk=unk,
        hos=h,
        confusion=confusion.tolist(),
        n_eval=int(truth.shape[0]),
        seed=model.config.seed if seed is None else seed,
        unk_defined=defined,
        method=model.method,
        lam=model.config.lam,
    )


@dataclass
class Aggregate:
    n: int
    mean: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    n_unk_undefined: int = 0

    def format(self, metric):
        return f"{self.mean[metric]:.2f}±{self.stderr[metric]:.2f}"

    def to_dict(self):
        return asdict(self)


def aggregate(reports):
    """Per-metric mean and standard error across seeds.

    HOS is averaged per seed, not recomputed from averaged OS*/UNK.
    """
    reports = list(reports)
    if not reports:
        raise InvalidInputError("cannot aggregate an empty list of reports")
    out = Aggregate(n=len(reports), n_unk_undefined=sum(not r.unk_defined for r in reports))
    for k in ("os_star", "unk", "hos"):
        v = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out.mean[k] = float(v.mean())
        out.stderr[k] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return out


@dataclass
class FriedmanResult:
    statistic: float
    friedman_p: float
    mean_ranks: list
    critical_difference: float
    pairwise_significant: list
    q_alpha: float
    alpha: float
    methods: list | None = None

    def to_dict(self):
        return asdict(self)


def nemenyi_q(k, alpha=0.05):
    if alpha not in NEMENYI_Q:
        raise InvalidInputError(f"Nemenyi table covers alpha in {sorted(NEMENYI_Q)}, got {alpha}")
    if not 2 <= k <= 20:
        raise InvalidInputError(f"Nemenyi table covers 2..20 methods, got {k}")
    return NEMENYI_Q[alpha][k - 2]


def friedman_nemenyi(scores, alpha=0.05, methods=None):
    """Friedman test over a methods x tasks matrix (higher score is better) plus Nemenyi CD.

    Ranks are 1 for the best method on a task, tied methods share the average
    rank. The statistic carries the usual tie correction; a matrix of all
    ties gives statistic 0 and p = 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
        raise InvalidInputError(f"need a methods x tasks matrix with >= 2 of each, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("score matrix has non-finite entries")
    k, n = s.shape
    ranks = np.column_stack([stats.rankdata(-s[:, j]) for j in range(n)])
    mean_ranks = ranks.mean(axis=1)
    ssr = n * np.sum((mean_ranks - (k + 1) / 2.0) ** 2)
    ties = 0.0
    for j in range(n):
        _, counts = np.unique(s[:, j], return_counts=True)
        ties += np.sum(counts**3 - counts)
    denom = 1.0 - ties / (n * (k**3 - k))
    if denom <= 0:
        statistic, p = 0.0, 1.0
    else:
        statistic = float(12.0 * ssr / (k * (k + 1)) / denom)
        p = float(stats.chi2.sf(statistic, k - 1))
    q = nemenyi_q(k, alpha)
    cd = q * math.sqrt(k * (k + 1) / (6.0 * n))
    gap = np.abs(mean_ranks[:, None] - mean_ranks[None, :])
    return FriedmanResult(
        statistic=statistic,
        friedman_p=p,
        mean_ranks=mean_ranks.tolist(),
        critical_difference=cd,
        pairwise_significant=(gap > cd).tolist(),
        q_alpha=q,
        alpha=alpha,
        methods=list(methods) if methods is not None else None,
    )


def write_score_matrix(path, scores, methods, tasks):
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *tasks])
        for name, row in zip(methods, scores):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_score_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InvalidInputError(f"{path}: score matrix needs a header and at least one row")
    tasks = rows[0][1:]
    methods, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(tasks) + 1:
            raise InvalidInputError(f"{path}: line {i} has {len(row) - 1} scores, expected {len(tasks)}")
        methods.append(row[0])
        values.append([float(v) for v in row[1:]])
    return np.asarray(values), methods, tasks
