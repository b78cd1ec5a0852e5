"""Dense float tensor primitives with hand-derived backward passes.

Tensors are plain numpy arrays: row-major data, float32 for training and
float64 for gradient checking.  Every exported operation is deterministic
(identical inputs give identical bytes on the same machine) and checks its
output for non-finite values.  Backward formulas are closed-form; the
finite-difference checker at the bottom is the independent referee the
tests use against every one of them.
"""

from __future__ import annotations

import math

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class NumericError(ValueError):
    """A computation produced a non-finite value."""


class InvalidLabelError(ValueError):
    """A label refers to a class excluded by the mask (or out of range)."""


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} produced non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _check_finite("matmul", a @ b)


def linear_forward(x, w, bias) -> np.ndarray:
    """x @ w + bias, with bias broadcast over the batch dimension."""
    x = np.asarray(x)
    w = np.asarray(w)
    bias = np.asarray(bias)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes {x.shape} and {w.shape} do not agree")
    if bias.shape != (w.shape[1],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match output width {w.shape[1]}"
        )
    return _check_finite("linear_forward", x @ w + bias)


def linear_backward(x, w, grad_out):
    """Gradients of a linear layer: (grad_x, grad_w, grad_bias)."""
    x = np.asarray(x)
    w = np.asarray(w)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match "
            f"({x.shape[0]}, {w.shape[1]})"
        )
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    _check_finite("linear_backward", grad_x)
    _check_finite("linear_backward", grad_w)
    return grad_x, grad_w, grad_bias


def layer_norm_forward(x, gain, shift, eps: float = 1e-5):
    """Row-wise layer norm: gain * (x - mean) / sqrt(var + eps) + shift.

    Returns (y, cache); the cache feeds layer_norm_backward.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    shift = np.asarray(shift)
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-D input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"gain/shift shapes {gain.shape}/{shift.shape} do not match width {d}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = np.square(x - mean).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, x.dtype))
    x_hat = (x - mean) * inv_std
    y = x_hat * gain + shift
    _check_finite("layer_norm_forward", y)
    return y, (x_hat, inv_std, gain)


def layer_norm_backward(cache, grad_out):
    """Exact analytic backward for layer_norm_forward.

    Returns (grad_x, grad_gain, grad_shift).
    """
    x_hat, inv_std, gain = cache
    grad_out = np.asarray(grad_out)
    if grad_out.shape != x_hat.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match {x_hat.shape}"
        )
    grad_gain = (grad_out * x_hat).sum(axis=0)
    grad_shift = grad_out.sum(axis=0)
    g = grad_out * gain
    # d=1 collapses to exactly zero: g - mean(g) vanishes term by term.
    grad_x = inv_std * (
        g
        - g.mean(axis=1, keepdims=True)
        - x_hat * (g * x_hat).mean(axis=1, keepdims=True)
    )
    _check_finite("layer_norm_backward", grad_x)
    return grad_x, grad_gain, grad_shift


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    return np.asarray(grad_out) * (x > 0).astype(x.dtype)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> np.ndarray:
    """tanh-approximated GELU used by the backbone feed-forward."""
    x = np.asarray(x)
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x, grad_out) -> np.ndarray:
    """Exact derivative of the tanh-approximated GELU times grad_out."""
    x = np.asarray(x)
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return np.asarray(grad_out) * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_cross_entropy(logits, labels, class_mask):
    """Masked softmax cross-entropy, averaged over the batch.

    Masked-out classes behave as if their logits were -inf: they get zero
    probability and zero gradient.  Returns (loss, grad_logits).
    """
    logits = np.asarray(logits)
    mask = np.asarray(class_mask, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if mask.shape != (c,):
        raise DimensionError(f"class_mask shape {mask.shape} does not match width {c}")
    if not mask.any():
        raise ValueError("class_mask excludes every class")
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if n == 0:
        raise ValueError("empty batch")
    if (labels < 0).any() or (labels >= c).any():
        raise InvalidLabelError("label outside logit range")
    if not mask[labels].all():
        bad = int(labels[~mask[labels]][0])
        raise InvalidLabelError(f"label {bad} is excluded by class_mask")

    neg_inf = np.asarray(-np.inf, dtype=logits.dtype)
    masked = np.where(mask[None, :], logits, neg_inf)
    m = masked.max(axis=1, keepdims=True)
    z = np.exp(masked - m)  # exact zeros at masked slots
    denom = z.sum(axis=1, keepdims=True)
    p = z / denom
    rows = np.arange(n)
    log_like = (logits[rows, labels] - m[:, 0]) - np.log(denom[:, 0])
    loss = float(-log_like.mean())
    if not math.isfinite(loss):
        raise NumericError("cross-entropy loss is non-finite")
    grad = p.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, _check_finite("softmax_cross_entropy", grad)


def finite_diff_check(loss_fn, params, analytic_grad, eps: float = 1e-4) -> float:
    """Max relative error between analytic_grad and central differences.

    Perturbs every element of params by +/- eps, evaluates loss_fn, and
    compares (f+ - f-) / 2 eps to the analytic gradient with the error
    normalised by max(|analytic|, |numeric|, 1e-8).
    """
    params = np.array(params, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise DimensionError(
            f"analytic_grad shape {grad.shape} does not match params {params.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    it = np.nditer(params, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = params[ix]
        params[ix] = orig + eps
        f_plus = float(loss_fn(params))
        params[ix] = orig - eps
        f_minus = float(loss_fn(params))
        params[ix] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("loss_fn returned a non-finite value")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(numeric), abs(grad[ix]), 1e-8)
        err = abs(numeric - grad[ix]) / denom
        if err > worst:
            worst = err
    return worst
