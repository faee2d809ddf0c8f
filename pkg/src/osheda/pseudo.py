"""Pseudo-labels for unlabeled target data and final predictions.

The pseudo-label model takes the argmax over known-class logits, then marks the
``floor((1 - lambda) * n)`` rows with the smallest maximum known logit as
unknown. The same rule doubles as the unknown detector for baselines whose
classifier has no unknown output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, ShapeError

# (1 - lam) * n is computed in floating point; 0.1 * 10 comes out as 0.9999999999999998
_FLOOR_SLACK = 1e-9


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    max_known_logit: np.ndarray


def n_unknown(n, lam):
    if not 0 < lam <= 1:
        raise InvalidConfigError(f"lambda must lie in (0, 1], got {lam}")
    return int(math.floor((1.0 - lam) * n + _FLOOR_SLACK))


def assign_open_set(known_logits, lam):
    """Known-class argmax plus lowest-confidence unknown assignment.

    ``known_logits`` holds only the known-class columns; the unknown label is
    ``known_logits.shape[1]``. Ties in the ranking go to the lower row index.
    """
    known_logits = np.asarray(known_logits, dtype=np.float64)
    if known_logits.ndim != 2 or known_logits.shape[0] < 1 or known_logits.shape[1] < 1:
        raise ShapeError(f"expected a non-empty (n, K) logit matrix, got {known_logits.shape}")
    n, n_known = known_logits.shape
    m = n_unknown(n, lam)
    labels = np.argmax(known_logits, axis=1)
    top = known_logits[np.arange(n), labels]
    if m:
        order = np.argsort(top, kind="stable")
        labels[order[:m]] = n_known
    return PseudoLabelBatch(labels=labels, max_known_logit=top)


def pseudo_label(target_logits, lam, unknown_index):
    target_logits = np.asarray(target_logits, dtype=np.float64)
    if target_logits.ndim != 2 or target_logits.shape[1] != unknown_index + 1:
        raise ShapeError(
            f"expected {unknown_index + 1} logit columns (known + unknown), got shape {target_logits.shape}"
        )
    return assign_open_set(target_logits[:, :unknown_index], lam)


def predict(logits):
    """Unrestricted argmax over all classes; ties resolve to the lowest index."""
    return np.argmax(np.asarray(logits), axis=1)
