"""Dense float64 kernels with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in float64. Every kernel works on the
last axis, so a ``(b, d)`` matrix and a ``(b, tokens, d)`` stack are
handled by the same code.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
NORM_EPS = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(ValueError):
    """NaN or Inf reached a kernel boundary."""


def check_finite(x, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def softmax_rows(x):
    """Row-wise softmax along the last axis (max-subtracted)."""
    x = check_finite(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, dy):
    """Gradient through softmax given its output ``y``."""
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def log_softmax_rows(x):
    x = check_finite(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm_forward(x, gain, bias, eps=LN_EPS):
    """Layer norm over the last axis; returns ``(y, cache)``.

    Population variance, ``eps`` added inside the square root.
    """
    x = check_finite(x)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm width mismatch: input width {d}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm(x, gain, bias, eps=LN_EPS):
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(dy, cache):
    """Returns ``(dx, dgain, dbias)``; parameter grads are summed over leading axes."""
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=lead)
    dbias = np.sum(dy, axis=lead)
    dxhat = dy * gain
    dx = inv_std / d * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x):
    """Exact (erf-based) GELU."""
    x = check_finite(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(np.float64)


def l2_normalize_rows(x, eps=NORM_EPS, strict=False):
    """Scale each row to unit L2 norm.

    With ``strict=True`` an all-zero row raises instead of being guarded by
    ``eps`` (the training path always uses the guarded form).
    """
    x = check_finite(x)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if strict:
        if np.any(norm == 0):
            raise ValueError("zero-norm row")
        return x / norm
    return x / (norm + eps)


def l2_normalize_forward(x, eps=NORM_EPS):
    x = check_finite(x)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    xhat = x / (norm + eps)
    return xhat, (x, norm, eps)


def l2_normalize_backward(dxhat, cache):
    x, norm, eps = cache
    denom = norm + eps
    # d||x||/dx = x / ||x||, undefined at 0 where the eps-guarded map is linear
    safe = np.where(norm > 0, norm, 1.0)
    proj = np.sum(x * dxhat, axis=-1, keepdims=True)
    return dxhat / denom - x * proj / (safe * denom * denom)


@dataclass
class GradCheckReport:
    param_name: str
    max_rel_error: float
    passed: bool


def grad_check(f, params, eps=1e-5, tol=1e-4):
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` maps the same
    names as ``params``. Each array in ``params`` is perturbed in place and
    restored afterwards. Relative error per entry uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``; the report keeps the worst entry.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    loss, analytic = f(params)
    if not np.isfinite(loss):
        raise ValueError("non-finite loss at probe point")
    reports = []
    for name, p in params.items():
        if not isinstance(p, np.ndarray) or not p.flags.writeable:
            raise TypeError(f"{name} must be a writeable ndarray to be perturbed in place")
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {a.shape}, expected {p.shape}")
        worst = 0.0
        flat = p.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = f(params)[0]
            flat[i] = orig - eps
            lm = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while probing {name}[{i}]")
            num = (lp - lm) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
        reports.append(GradCheckReport(name, float(worst), bool(worst < tol)))
    return reports
