"""Scalar training losses, composed from the differentiable primitives."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor

NEG_INF = -1e30  # additive-mask stand-in for -inf; exp underflows to exactly 0


def _check_finite(name: str, *tensors) -> None:
    for t in tensors:
        if t is not None and not np.all(np.isfinite(as_tensor(t).data)):
            raise ValueError(f"{name}: non-finite input rejected")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check_finite("mse_loss", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = ops.sub(pred, target)
    return ops.mean(ops.multiply(diff, diff))


def smooth_l1_raw(pred, target, beta: float = 1.0) -> Tensor:
    """Element-wise Huber values: quadratic below ``beta``, linear above."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_finite("smooth_l1_loss", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: shapes {pred.shape} and {target.shape} differ")
    diff = ops.sub(pred, target)
    absd = np.abs(diff.data)
    quad = absd < beta
    # branch selection is constant w.r.t. the tape; each branch is smooth
    sq = ops.scale(ops.multiply(diff, diff), 0.5 / beta)
    lin = ops.sub(ops.multiply(Tensor(np.sign(diff.data)), diff),
                  Tensor(np.full_like(absd, 0.5 * beta)))
    return ops.add(ops.multiply(sq, Tensor(quad.astype(float))),
                   ops.multiply(lin, Tensor((~quad).astype(float))))


def smooth_l1_loss(pred, target, beta: float = 1.0) -> Tensor:
    return ops.mean(smooth_l1_raw(pred, target, beta))


def cross_entropy(logits, targets: np.ndarray,
                  weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax.

    ``weights`` (same length as targets) scales per-row losses; the mean is
    over the total weight, so zero-weight rows are excluded entirely.
    """
    logits = as_tensor(logits)
    _check_finite("cross_entropy", logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} with targets {targets.shape}")
    # stable log-sum-exp; the shift is constant w.r.t. the tape, which leaves
    # the gradient exactly softmax(logits)
    shift = logits.data.max(axis=1, keepdims=True)
    z = ops.add_mask(logits, -shift)
    lse = ops.log(ops.sum_(ops.exp(z), axis=1))
    picked = ops.row_gather(z, targets)
    per_row = ops.sub(lse, picked)
    if weights is None:
        return ops.mean(per_row)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != targets.shape:
        raise ShapeError("cross_entropy: weight shape mismatch")
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    return ops.scale(ops.sum_(ops.multiply(per_row, Tensor(weights))), 1.0 / total)


def gaussian_kl(mu1, logvar1, mu2=None, logvar2=None) -> Tensor:
    """KL divergence between diagonal Gaussians, summed over the feature axis
    and averaged over leading axes. ``mu2/logvar2`` default to N(0, I)."""
    mu1, logvar1 = as_tensor(mu1), as_tensor(logvar1)
    _check_finite("gaussian_kl", mu1, logvar1, mu2, logvar2)
    if mu1.shape != logvar1.shape:
        raise ShapeError("gaussian_kl: mu/logvar shapes differ")
    if mu2 is None:
        mu2 = Tensor(np.zeros(mu1.shape))
        logvar2 = Tensor(np.zeros(mu1.shape))
    else:
        mu2, logvar2 = as_tensor(mu2), as_tensor(logvar2)
    # KL = 0.5 * [ logvar2 - logvar1 + (var1 + (mu1-mu2)^2)/var2 - 1 ]
    dmu = ops.sub(mu1, mu2)
    var1 = ops.exp(logvar1)
    inv_var2 = ops.exp(ops.negate(logvar2))
    term = ops.add(ops.sub(logvar2, logvar1),
                   ops.sub(ops.multiply(ops.add(var1, ops.multiply(dmu, dmu)), inv_var2),
                           Tensor(np.ones(mu1.shape))))
    per_item = ops.sum_(ops.scale(term, 0.5), axis=-1)
    if per_item.ndim == 0:
        return per_item
    return ops.mean(per_item)


def _l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    sq = ops.sum_(ops.multiply(x, x), axis=-1, keepdims=True)
    norm = ops.sqrt(ops.add(sq, Tensor(np.full(sq.shape, eps))))
    return ops.divide(x, norm)


def infonce(a, b, temperature: float, admit_mask: Optional[np.ndarray] = None) -> Tensor:
    """Symmetric InfoNCE over two paired embedding batches.

    Cosine-similarity logits at the given temperature; ``admit_mask[i, j]``
    (False off the diagonal) removes pair (i, j) from the negatives in both
    directions. Diagonal entries are always the positives.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("infonce", a, b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"infonce: expected matching (N, D) batches, "
                         f"got {a.shape} and {b.shape}")
    n = a.shape[0]
    logits = ops.scale(ops.matmul(_l2_normalize(a), transpose2(_l2_normalize(b))),
                       1.0 / float(temperature))
    if admit_mask is not None:
        admit_mask = np.asarray(admit_mask, dtype=bool)
        if admit_mask.shape != (n, n):
            raise ShapeError(f"infonce: mask shape {admit_mask.shape} != ({n}, {n})")
        blocked = ~admit_mask
        np.fill_diagonal(blocked, False)
        if blocked.any():
            logits = ops.add_mask(logits, np.where(blocked, NEG_INF, 0.0))
    labels = np.arange(n)
    loss_ab = cross_entropy(logits, labels)
    loss_ba = cross_entropy(transpose2(logits), labels)
    return ops.scale(ops.add(loss_ab, loss_ba), 0.5)


def transpose2(x: Tensor) -> Tensor:
    return ops.transpose(x, (1, 0))
