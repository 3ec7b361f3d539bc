"""Training objectives for compatible representation learning.

Every loss is a batch mean and returns its value together with gradients
w.r.t. its differentiable inputs. Frozen old-class prototypes never receive
a gradient.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, StructuralError

MODES = (
    "independent",
    "bct",
    "oca",
    "oca_no_ortho",
    "oca_no_cos",
    "oca_no_ortho_no_cos",
)


@dataclass(frozen=True)
class LossSpec:
    mode: str = "oca"
    lambda1: float = 10.0
    lambda2: float = 5.0
    lambda_bct: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise StructuralError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("lambda1", "lambda2", "lambda_bct"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise StructuralError(f"{name} must be finite and >= 0, got {value}")

    @property
    def expanded(self):
        """True for modes that train on ``[h_bct | h_e]``."""
        return self.mode.startswith("oca")

    @property
    def uses_ortho(self):
        return self.mode in ("oca", "oca_no_cos")

    @property
    def uses_cos(self):
        return self.mode in ("oca", "oca_no_ortho")

    @property
    def effective_lambda2(self):
        return self.lambda2 if self.uses_cos else 0.0


@dataclass
class LossBreakdown:
    total: float
    ce_new: float = 0.0
    ce_proto: float = 0.0
    cos_align: float = 0.0

    def recombine(self, spec):
        """Weighted combination of the components that ``spec`` prescribes."""
        if spec.mode == "independent":
            return self.ce_new
        if spec.mode == "bct":
            return self.ce_new + spec.lambda_bct * self.ce_proto
        return self.ce_new + spec.lambda1 * self.ce_proto + spec.effective_lambda2 * self.cos_align

    def as_dict(self):
        return {
            "total": self.total,
            "ce_new": self.ce_new,
            "ce_proto": self.ce_proto,
            "cos_align": self.cos_align,
        }


def _check_labels(labels, num_classes, what):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise StructuralError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise StructuralError(f"label {bad} has no {what} (have {num_classes})")
    return labels.astype(np.intp)


def _softmax_ce(logits, labels):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    loss = -log_prob[np.arange(n), labels].mean()
    dlogits = exp / denom
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def ce_learnable(h, labels, weights):
    """Softmax cross-entropy with logits ``h @ W.T``.

    Returns ``(loss, dL/dh, dL/dW)``.
    """
    h = np.asarray(h, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if h.shape[1] != weights.shape[1]:
        raise StructuralError(f"feature dim {h.shape[1]} != classifier dim {weights.shape[1]}")
    labels = _check_labels(labels, weights.shape[0], "classifier row")
    loss, dlogits = _softmax_ce(h @ weights.T, labels)
    return loss, dlogits @ weights, dlogits.T @ h


def ce_prototypes(h_bct, labels, prototypes):
    """Cross-entropy against frozen prototypes; returns ``(loss, dL/dh_bct)``."""
    h_bct = np.asarray(h_bct, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if h_bct.shape[1] != prototypes.shape[1]:
        raise StructuralError(
            f"feature dim {h_bct.shape[1]} != prototype dim {prototypes.shape[1]}"
        )
    labels = _check_labels(labels, prototypes.shape[0], "prototype")
    loss, dlogits = _softmax_ce(h_bct @ prototypes.T, labels)
    return loss, dlogits @ prototypes


def cos_align(h_bct, labels, prototypes):
    """Mean cosine distance ``1 - cos(h, W_old[y])``; returns ``(loss, dL/dh_bct)``."""
    h_bct = np.asarray(h_bct, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if h_bct.shape[1] != prototypes.shape[1]:
        raise StructuralError(
            f"feature dim {h_bct.shape[1]} != prototype dim {prototypes.shape[1]}"
        )
    labels = _check_labels(labels, prototypes.shape[0], "prototype")
    target = prototypes[labels]
    h_norm = np.linalg.norm(h_bct, axis=1)
    t_norm = np.linalg.norm(target, axis=1)
    if np.any(h_norm == 0):
        raise NumericError(f"zero-norm feature at row {int(np.flatnonzero(h_norm == 0)[0])}")
    if np.any(t_norm == 0):
        raise NumericError(f"zero-norm prototype for label {labels[np.flatnonzero(t_norm == 0)[0]]}")
    n = h_bct.shape[0]
    cos = np.einsum("ij,ij->i", h_bct, target) / (h_norm * t_norm)
    dcos = target / (h_norm * t_norm)[:, None] - cos[:, None] * h_bct / (h_norm ** 2)[:, None]
    return float(np.mean(1.0 - cos)), -dcos / n


def ace_loss(h_bct, labels, prototypes, lambda1, lambda2):
    """``lambda1 * ce_prototypes + lambda2 * cos_align``.

    Returns ``(ce_proto, cos_value, dL/dh_bct)``; a term whose weight is zero
    is neither evaluated nor differentiated and reports 0.
    """
    grad = np.zeros_like(np.asarray(h_bct, dtype=np.float64))
    ce_val = cos_val = 0.0
    if lambda1:
        ce_val, g = ce_prototypes(h_bct, labels, prototypes)
        grad += lambda1 * g
    if lambda2:
        cos_val, g = cos_align(h_bct, labels, prototypes)
        grad += lambda2 * g
    return ce_val, cos_val, grad


def oca_total(h_new, q, labels, weights, prototypes, spec):
    """Full objective for the expanded-space modes.

    ``q`` is the orthogonal matrix of the transformation layer (ignored by the
    ``*_no_ortho`` modes). The learnable classifier sees ``h_new @ q.T``; the
    alignment terms see the leading ``prototypes.shape[1]`` columns of
    ``h_new``. Returns ``(LossBreakdown, grads)`` with keys ``h``, ``W`` and
    ``Q`` (``None`` when the layer is unused).
    """
    if not spec.expanded:
        raise StructuralError(f"oca_total called with mode {spec.mode!r}")
    h_new = np.asarray(h_new, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    d_old = prototypes.shape[1]
    if d_old >= h_new.shape[1]:
        raise StructuralError(
            f"expanded embedding ({h_new.shape[1]}) must exceed prototype dim ({d_old})"
        )
    grad_q = None
    if spec.uses_ortho:
        h_perp = h_new @ q.T
        ce_new, d_perp, d_w = ce_learnable(h_perp, labels, weights)
        d_h = d_perp @ q
        grad_q = d_perp.T @ h_new
    else:
        ce_new, d_h, d_w = ce_learnable(h_new, labels, weights)

    ce_proto, cos_val, d_bct = ace_loss(
        h_new[:, :d_old], labels, prototypes, spec.lambda1, spec.effective_lambda2
    )
    d_h[:, :d_old] += d_bct
    total = ce_new + spec.lambda1 * ce_proto + spec.effective_lambda2 * cos_val
    return (
        LossBreakdown(total, ce_new, ce_proto, cos_val),
        {"h": d_h, "W": d_w, "Q": grad_q},
    )


def bct_loss(h, labels, weights, prototypes, lambda_bct):
    """Classification loss plus ``lambda_bct`` times the influence loss."""
    ce_new, d_h, d_w = ce_learnable(h, labels, weights)
    ce_proto = 0.0
    if lambda_bct:
        ce_proto, g = ce_prototypes(h, labels, prototypes)
        d_h = d_h + lambda_bct * g
    return (
        LossBreakdown(ce_new + lambda_bct * ce_proto, ce_new, ce_proto, 0.0),
        {"h": d_h, "W": d_w, "Q": None},
    )


def objective(h, q, labels, weights, prototypes, spec):
    """Dispatch on ``spec.mode``; same return convention as :func:`oca_total`."""
    if spec.expanded:
        return oca_total(h, q, labels, weights, prototypes, spec)
    if spec.mode == "bct":
        return bct_loss(h, labels, weights, prototypes, spec.lambda_bct)
    ce_new, d_h, d_w = ce_learnable(h, labels, weights)
    return LossBreakdown(ce_new, ce_new), {"h": d_h, "W": d_w, "Q": None}
