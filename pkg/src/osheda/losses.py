"""The four objective terms and their gradients.

Every loss returns ``(value, *grads)`` where each gradient is taken with
respect to the matching array argument (logits or representation rows).
Pseudo-labels are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBatchError, InvalidInputError, StateError


@dataclass(frozen=True)
class Toggles:
    align: bool = True
    segregate: bool = True
    osd: bool = True
    two_stage: bool = True

    @property
    def needs_pseudo_labels(self):
        return self.align or self.segregate

    def label(self):
        off = [name for name in ("align", "segregate", "osd", "two_stage") if not getattr(self, name)]
        return "full" if not off else "-" + "-".join(off)

    def to_dict(self):
        return {"align": self.align, "segregate": self.segregate, "osd": self.osd, "two_stage": self.two_stage}


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_inv: float = 0.0
    l_seg: float = 0.0
    l_osd: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return {"l_cls": self.l_cls, "l_inv": self.l_inv, "l_seg": self.l_seg, "l_osd": self.l_osd, "total": self.total}


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_rows(logits, labels):
    """Per-row cross-entropy and softmax probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"logits {logits.shape} and labels {labels.shape} do not align")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label out of range for {logits.shape[1]} classes")
    logp = _log_softmax(logits)
    rows = np.arange(logits.shape[0])
    return -logp[rows, labels], np.exp(logp)


def cross_entropy(logits, labels):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    ce, probs = cross_entropy_rows(logits, labels)
    n = ce.shape[0]
    if n == 0:
        raise InvalidBatchError("cross-entropy of an empty batch")
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return float(ce.mean()), grad / n


def l_cls(source_logits, source_labels, target_logits, target_labels, lam):
    """lam * CE(source) + CE(labeled target), each a per-batch mean."""
    if len(source_labels) == 0 or len(target_labels) == 0:
        raise InvalidBatchError("l_cls needs non-empty source and labeled-target batches")
    ce_s, g_s = cross_entropy(source_logits, source_labels)
    ce_t, g_t = cross_entropy(target_logits, target_labels)
    return lam * ce_s + ce_t, lam * g_s, g_t


def _centroid_gap(a, b):
    diff = a.mean(axis=0) - b.mean(axis=0)
    return float(diff @ diff), diff


def l_inv(source_reprs, source_labels, target_reprs, target_labels, n_known):
    """Squared distance of marginal and per-class centroids, source vs target-known.

    A class term is skipped when either side has no rows of that class; the
    marginal term is skipped when either side is empty.
    """
    zs = np.asarray(source_reprs, dtype=np.float64)
    zt = np.asarray(target_reprs, dtype=np.float64)
    ys = np.asarray(source_labels)
    yt = np.asarray(target_labels)
    if zs.shape[0] == 0 and zt.shape[0] == 0:
        raise InvalidBatchError("l_inv with both batches empty")
    gs = np.zeros_like(zs)
    gt = np.zeros_like(zt)
    if zs.shape[0] == 0 or zt.shape[0] == 0:
        return 0.0, gs, gt
    value, diff = _centroid_gap(zs, zt)
    gs += 2.0 * diff / zs.shape[0]
    gt -= 2.0 * diff / zt.shape[0]
    for m in range(n_known):
        ms = ys == m
        mt = yt == m
        ns, nt = int(ms.sum()), int(mt.sum())
        if ns == 0 or nt == 0:
            continue
        v, d = _centroid_gap(zs[ms], zt[mt])
        value += v
        gs[ms] += 2.0 * d / ns
        gt[mt] -= 2.0 * d / nt
    return value, gs, gt


def l_seg(known_reprs, unknown_reprs):
    """Squared distance between known and unknown centroids; 0 if a side is empty."""
    zk = np.asarray(known_reprs, dtype=np.float64)
    zu = np.asarray(unknown_reprs, dtype=np.float64)
    gk = np.zeros_like(zk)
    gu = np.zeros_like(zu)
    if zk.shape[0] == 0 or zu.shape[0] == 0:
        return 0.0, gk, gu
    value, diff = _centroid_gap(zk, zu)
    gk += 2.0 * diff / zk.shape[0]
    gu -= 2.0 * diff / zu.shape[0]
    return value, gk, gu


def l_osd(target_logits, source_logits, lam, unknown_index):
    """Non-negative open-set difference: max(0, CE_t(unk) - lam * CE_s(unk))."""
    target_logits = np.asarray(target_logits, dtype=np.float64)
    source_logits = np.asarray(source_logits, dtype=np.float64)
    if target_logits.shape[0] == 0:
        raise InvalidBatchError("l_osd needs a non-empty target batch")
    ce_t, g_t = cross_entropy(target_logits, np.full(target_logits.shape[0], unknown_index))
    if source_logits.shape[0]:
        ce_s, g_s = cross_entropy(source_logits, np.full(source_logits.shape[0], unknown_index))
    else:
        ce_s, g_s = 0.0, np.zeros_like(source_logits)
    raw = ce_t - lam * ce_s
    if raw <= 0.0:
        return 0.0, np.zeros_like(g_t), np.zeros_like(g_s)
    return raw, g_t, -lam * g_s


@dataclass
class StepTensors:
    """Network outputs for one minibatch triple.

    ``tu_pseudo`` is ``None`` in stage 1 or when no pseudo-labels are needed.
    """

    src_logits: np.ndarray
    src_reprs: np.ndarray
    src_labels: np.ndarray
    tl_logits: np.ndarray
    tl_reprs: np.ndarray
    tl_labels: np.ndarray
    tu_logits: np.ndarray
    tu_reprs: np.ndarray
    tu_pseudo: np.ndarray | None = None
    grads: dict = field(default_factory=dict)


def total_loss(t, lam, unknown_index, toggles=Toggles(), stage2=True):
    """Evaluate L = l_cls + l_inv - l_seg + l_osd for one step.

    Disabled terms (by toggle or because ``stage2`` is false) contribute 0
    and no gradient. Gradients land in ``t.grads`` keyed by field name.
    """
    g = {
        "src_logits": np.zeros_like(t.src_logits),
        "src_reprs": np.zeros_like(t.src_reprs),
        "tl_logits": np.zeros_like(t.tl_logits),
        "tl_reprs": np.zeros_like(t.tl_reprs),
        "tu_logits": np.zeros_like(t.tu_logits),
        "tu_reprs": np.zeros_like(t.tu_reprs),
    }
    out = LossBreakdown()
    out.l_cls, gs, gt = l_cls(t.src_logits, t.src_labels, t.tl_logits, t.tl_labels, lam)
    g["src_logits"] += gs
    g["tl_logits"] += gt

    if stage2 and (toggles.align or toggles.segregate):
        if t.tu_pseudo is None:
            raise StateError("alignment/segregation terms need pseudo-labels for the unlabeled batch")
        pk = t.tu_pseudo != unknown_index
        n_tl = t.tl_reprs.shape[0]
        if toggles.align:
            zt = np.concatenate([t.tl_reprs, t.tu_reprs[pk]])
            yt = np.concatenate([t.tl_labels, t.tu_pseudo[pk]])
            out.l_inv, gs, gt = l_inv(t.src_reprs, t.src_labels, zt, yt, unknown_index)
            g["src_reprs"] += gs
            g["tl_reprs"] += gt[:n_tl]
            g["tu_reprs"][pk] += gt[n_tl:]
        if toggles.segregate:
            n_s = t.src_reprs.shape[0]
            zk = np.concatenate([t.src_reprs, t.tl_reprs, t.tu_reprs[pk]])
            out.l_seg, gk, gu = l_seg(zk, t.tu_reprs[~pk])
            # L subtracts l_seg
            g["src_reprs"] -= gk[:n_s]
            g["tl_reprs"] -= gk[n_s : n_s + n_tl]
            g["tu_reprs"][pk] -= gk[n_s + n_tl :]
            g["tu_reprs"][~pk] -= gu

    if stage2 and toggles.osd:
        n_tl = t.tl_logits.shape[0]
        target_logits = np.concatenate([t.tl_logits, t.tu_logits])
        out.l_osd, gt, gs = l_osd(target_logits, t.src_logits, lam, unknown_index)
        g["tl_logits"] += gt[:n_tl]
        g["tu_logits"] += gt[n_tl:]
        g["src_logits"] += gs

    out.total = out.l_cls + out.l_inv - out.l_seg + out.l_osd
    t.grads = g
    return out
