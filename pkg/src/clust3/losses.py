"""Cross-entropy, information-maximization clustering loss, and multi-head MI bounds.

All entropies use the natural log. ``0·log 0`` is taken as 0 by clamping the
argument of the log at 1e-12 (probabilities themselves are never altered).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, LabelError, ShapeError, SizeError
from .tensor import Tensor

STOCHASTIC_TOL = 1e-4


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    B, num_classes = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    picked = T.take_rows(T.log_softmax_rows(logits), labels.astype(np.int64))
    return -T.mean(picked)


def _check_stochastic(z: Tensor):
    if z.ndim not in (2, 3):
        raise ShapeError(f"cluster assignment must be N×K or N×H×K, got {z.shape}")
    data = z.data
    if data.min() < -STOCHASTIC_TOL or np.abs(data @ np.ones(data.shape[-1], dtype=data.dtype) - 1.0).max() > STOCHASTIC_TOL:
        raise ContractError("cluster assignment rows are not probability vectors")


def entropy_terms(z):
    """``(H(Z|X), H(Z))`` of a row-stochastic assignment.

    ``N×K`` input gives scalars; ``N×H×K`` (H heads) gives length-H vectors.
    """
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    _check_stochastic(z)
    n = z.shape[0]
    h_cond = T.tsum(T.xlogx(z), axis=(0, z.ndim - 1)) * (-1.0 / n)
    zbar = T.mean(z, axis=0)
    h_marg = -T.tsum(T.xlogx(zbar), axis=-1)
    return h_cond, h_marg


def im_loss(z):
    """``L_IM = H(Z|X) - H(Z)``, the negative mutual information.

    Returns ``(loss, h_cond, h_marg)``; per head when ``z`` is ``N×H×K``.
    """
    h_cond, h_marg = entropy_terms(z)
    return h_cond - h_marg, h_cond, h_marg


def prediction_entropy(logits: Tensor) -> Tensor:
    """Mean Shannon entropy of the softmax predictions."""
    p = T.softmax_rows(logits)
    return -T.mean(T.tsum(T.xlogx(p), axis=1))


def _flat(values: dict):
    if not values:
        return np.zeros(0)
    return np.concatenate([np.atleast_1d(v.data).astype(np.float64) for v in values.values()])


@dataclass
class LossReport:
    ce: Tensor
    im: dict = field(default_factory=dict)  # layer -> per-head L_IM
    h_cond: dict = field(default_factory=dict)
    h_marg: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)  # layer -> weight
    total: Tensor = None

    def per_head(self):
        return _flat(self.im), _flat(self.h_cond), _flat(self.h_marg)

    def floats(self):
        im, hc, hm = self.per_head()
        return {
            "ce": float(self.ce.data),
            "total": float(self.total.data),
            "im_sum": float(im.sum()),
            "im_mean": float(im.mean()) if im.size else 0.0,
            "h_cond_mean": float(hc.mean()) if hc.size else 0.0,
            "h_marg_mean": float(hm.mean()) if hm.size else 0.0,
        }


def im_total(z: dict, lam=None):
    """``Σ_layer λ_layer · Σ_head L_IM`` plus the per-layer pieces."""
    lam = dict(lam or {})
    total = None
    parts = {}
    for layer in sorted(z):
        loss, hc, hm = im_loss(z[layer])
        parts[layer] = (loss, hc, hm)
        term = T.tsum(loss)
        weight = lam.get(layer, 1.0)
        if weight != 1.0:
            term = term * weight
        total = term if total is None else total + term
    return total, parts


def total_loss(logits, labels, z: dict, lam=None) -> LossReport:
    """``L_CE + Σ_layer λ_layer · Σ_head L_IM``.

    ``z`` maps a layer index to its ``N×H×K`` (or single-head ``N×K``)
    assignment; ``lam`` maps layer to weight (default 1). An empty ``z``
    reduces to plain cross-entropy.
    """
    ce = cross_entropy(logits, labels)
    report = LossReport(ce=ce)
    im, parts = im_total(z, lam)
    for layer, (loss, hc, hm) in parts.items():
        report.im[layer], report.h_cond[layer], report.h_marg[layer] = loss, hc, hm
        report.lam[layer] = (lam or {}).get(layer, 1.0)
    report.total = ce if im is None else ce + im
    return report


# ---------------------------------------------------------------------------
# multi-head bounds (plain numpy, diagnostics only)


def _entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return float(-np.sum(p * np.log(np.maximum(p, 1e-12))))


def assignment_entropies(z):
    """``(H(Z|X), H(Z))`` of a numpy assignment, X uniform over rows."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    h_cond = float(-np.sum(z * np.log(np.maximum(z, 1e-12))) / n)
    return h_cond, _entropy(z.mean(axis=0))


def mutual_information(z):
    h_cond, h_marg = assignment_entropies(z)
    return h_marg - h_cond


def lemma_bounds(z_list):
    """Lower and upper bounds on ``I(X; Z_1..Z_C)`` for conditionally independent heads.

    lower = max_c H(Z_c) - Σ_c H(Z_c|X); upper = Σ_c I(X; Z_c).
    """
    z_list = [np.asarray(z, dtype=np.float64) for z in z_list]
    if not z_list:
        raise ContractError("need at least one head")
    n = z_list[0].shape[0]
    if any(z.shape[0] != n for z in z_list):
        raise ContractError("all heads must cover the same rows")
    terms = [assignment_entropies(z) for z in z_list]
    lower = max(hm for _, hm in terms) - sum(hc for hc, _ in terms)
    upper = sum(hm - hc for hc, hm in terms)
    return lower, upper


def joint_mi_bruteforce(z_list, weights=None, max_outcomes=10**6):
    """Exact ``I(X; Z_1..Z_C)`` by enumerating the joint cluster outcome space.

    Heads are conditionally independent given X, so
    ``p(z_1..z_C | x) = Π_c p(z_c | x)``. X is uniform over rows unless
    ``weights`` gives its distribution.
    """
    z_list = [np.asarray(z, dtype=np.float64) for z in z_list]
    n = z_list[0].shape[0]
    if any(z.shape[0] != n for z in z_list):
        raise ContractError("all heads must cover the same rows")
    sizes = [z.shape[1] for z in z_list]
    if int(np.prod(sizes, dtype=np.float64)) > max_outcomes:
        raise SizeError(f"joint outcome space {sizes} exceeds {max_outcomes}")
    px = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)

    h_joint_cond = 0.0
    joint = np.zeros(sizes)
    for i in range(n):
        # outer product of the per-head conditionals for row i
        cond = np.ones(())
        for z in z_list:
            cond = np.multiply.outer(cond, z[i])
        joint += px[i] * cond
        h_joint_cond += px[i] * _entropy(cond.ravel())
    return _entropy(joint.ravel()) - h_joint_cond

