"""Training losses: focal classification loss and smooth-L1 box regression.

Both are fused graph ops: the forward uses overflow-safe formulations and the
backward applies the closed-form derivative. The finite-difference harness is
the independent check on these derivatives.
"""

from __future__ import annotations

import warnings

import numpy as np

from .anchors import IGNORE
from .tensor import ShapeError, Tensor, _accum


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)) without overflow
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss over multi-binary class logits.

    ``logits`` is (..., K, C) and ``labels`` (..., K) with values -1 (ignore,
    excluded entirely), 0 (background), or 1..C (positive class). Per element
    the loss is ``-alpha_t * (1 - p_t)**gamma * log(p_t)`` in the
    binary-per-class form; the sum is normalized by max(1, #positive anchors).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"focal_loss: logits {logits.shape} do not align with labels {labels.shape}")
    c = logits.shape[-1]
    if labels.max(initial=0) > c:
        raise ValueError(f"focal_loss: label {labels.max()} exceeds {c} classes")

    flat_logits = logits.data.reshape(-1, c)
    flat_labels = labels.reshape(-1)
    valid = flat_labels != IGNORE
    if not valid.any():
        warnings.warn("focal_loss: every anchor is ignore-labeled, returning 0", RuntimeWarning)
        return Tensor(np.zeros((), dtype=logits.dtype))

    x = flat_logits[valid]
    lab = flat_labels[valid]
    t = np.zeros_like(x)
    pos_rows = lab > 0
    t[np.flatnonzero(pos_rows), lab[pos_rows] - 1] = 1.0

    p = _sigmoid(x)
    # ce = -log(p_t): softplus(-x) for targets, softplus(x) otherwise
    ce = np.where(t == 1.0, _softplus(-x), _softplus(x))
    p_t = t * p + (1.0 - t) * (1.0 - p)
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    mod = (1.0 - p_t) ** gamma
    num_pos = max(1, int(pos_rows.sum()))
    out = (alpha_t * mod * ce).sum() / num_pos

    def backward_fn(g):
        if not logits.requires_grad:
            return
        # d/dx [alpha_t (1-p_t)^g ce] = alpha_t (1-p_t)^g [(p - t) + g*(2t-1)*p_t*log(p_t)]
        log_pt = -ce
        dvalid = alpha_t * mod * ((p - t) + gamma * (2.0 * t - 1.0) * p_t * log_pt)
        dflat = np.zeros_like(flat_logits)
        dflat[valid] = dvalid * (float(g) / num_pos)
        _accum(logits, dflat.reshape(logits.shape))

    return Tensor._result(np.asarray(out, dtype=logits.dtype), (logits,), backward_fn, "focal_loss")


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Plain summed BCE over logits; reference point for the focal reduction
    (focal with gamma=0 and alpha=0.5, doubled, equals this)."""
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out = (_softplus(x) - x * t).sum()

    def backward_fn(g):
        if logits.requires_grad:
            _accum(logits, float(g) * (_sigmoid(x) - t))

    return Tensor._result(np.asarray(out, dtype=logits.dtype), (logits,), backward_fn, "bce_with_logits")


def smooth_l1_loss(pred: Tensor, target: np.ndarray, beta: float = 1.0 / 9.0) -> Tensor:
    """Huber-style box loss on positives only, mean over the M*4 coordinates.

    Elementwise 0.5*d^2/beta for |d| < beta, else |d| - 0.5*beta (continuous,
    with continuous gradient, at |d| = beta). Empty input yields 0.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))

    d = pred.data - target
    ad = np.abs(d)
    el = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = pred.size
    out = el.sum() / n

    def backward_fn(g):
        if pred.requires_grad:
            grad = np.where(ad < beta, d / beta, np.sign(d))
            _accum(pred, grad * (float(g) / n))

    return Tensor._result(np.asarray(out, dtype=pred.dtype), (pred,), backward_fn, "smooth_l1_loss")
