"""Logit-adjusted losses, the compensation factor, and prior-shift diagnostics.

Labels are 0-based class indices. Multiplicative class terms inside the
softmax (``n_k`` and ``Lambda_k``) are applied as additive log offsets.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core_math import check_finite, softmax_rows


@dataclass(frozen=True)
class ClassFrequencies:
    counts: tuple

    def __init__(self, counts):
        counts = tuple(int(c) for c in counts)
        if not counts:
            raise ValueError("empty class counts")
        if any(c <= 0 for c in counts):
            raise ValueError("class counts must be positive")
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self):
        return len(self.counts)

    @property
    def total(self):
        return sum(self.counts)

    @property
    def n_min(self):
        return min(self.counts)

    @property
    def beta(self):
        return max(self.counts) / min(self.counts)

    @property
    def array(self):
        return np.asarray(self.counts, dtype=np.float64)

    @property
    def priors(self):
        return self.array / self.total


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.5
    gamma: float = 0.05
    lambda1: float = 0.015
    lambda2: float = 0.015
    lambda3: float = 0.4

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        for name in ("gamma", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _as_freq(freq):
    return freq if isinstance(freq, ClassFrequencies) else ClassFrequencies(freq)


def adjusted_cross_entropy(z, labels, log_offsets, grad=False):
    """Mean of ``-log softmax(z + log_offsets)[y]``; optionally with ``dL/dz``."""
    z = check_finite(z, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    a = z + log_offsets
    lse = logsumexp(a, axis=-1)
    b = z.shape[0]
    loss = float(np.mean(lse - a[np.arange(b), labels]))
    if not grad:
        return loss
    dz = softmax_rows(a)
    dz[np.arange(b), labels] -= 1.0
    return loss, dz / b


def la_loss(z, labels, freq, grad=False):
    """Balanced (logit-adjusted) cross entropy with ``n_k`` inside the softmax."""
    freq = _as_freq(freq)
    return adjusted_cross_entropy(z, labels, np.log(freq.array), grad)


def compensation_factors(freq, cfg):
    """``mu * n_i**gamma * S_N / (C * n_min)`` per class."""
    freq = _as_freq(freq)
    n = freq.array
    return cfg.mu * n ** cfg.gamma * freq.total / (freq.n_classes * freq.n_min)


def cf_log_offsets(freq, cfg):
    freq = _as_freq(freq)
    n = freq.array
    log_lam = (np.log(cfg.mu) + cfg.gamma * np.log(n)
               + np.log(freq.total) - np.log(freq.n_classes * freq.n_min))
    return np.log(n) + log_lam


def cf_loss(z, labels, freq, cfg, grad=False):
    """Logit-adjusted cross entropy with ``n_k * Lambda_k`` inside the softmax."""
    return adjusted_cross_entropy(z, labels, cf_log_offsets(freq, cfg), grad)


def composite_loss(z, z_v, z_t, z_hat, labels, freq, cfg, grad=False, log_offsets=None):
    """``cf(z) + l1 cf(z_v) + l2 cf(z_t) + l3 cf(z_hat)``.

    With ``grad=True`` returns ``(loss, (dz, dz_v, dz_t, dz_hat))``; a term
    whose weight is zero contributes zero gradient and is not evaluated.
    ``log_offsets`` replaces the CF offsets (the trainer passes plain
    ``log n`` when CF is ablated).
    """
    offs = cf_log_offsets(freq, cfg) if log_offsets is None else log_offsets
    terms = ((1.0, z), (cfg.lambda1, z_v), (cfg.lambda2, z_t), (cfg.lambda3, z_hat))
    total = 0.0
    grads = []
    for weight, logits in terms:
        if weight == 0.0:
            grads.append(np.zeros_like(np.asarray(z, dtype=np.float64)))
            continue
        if grad:
            l, g = adjusted_cross_entropy(logits, labels, offs, grad=True)
            grads.append(weight * g)
        else:
            l = adjusted_cross_entropy(logits, labels, offs)
        total += weight * l
    return (total, tuple(grads)) if grad else total


def _check_priors(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError(f"zero prior in {name}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1")
    return p


def post_compensate(z, train_priors, test_priors):
    """Shift logits by ``log P_t(i) - log P_s(i)``."""
    ps = _check_priors(train_priors, "train priors")
    pt = _check_priors(test_priors, "test priors")
    # one shift term, so P_s == P_t adds an exact zero
    return np.asarray(z, dtype=np.float64) + (np.log(pt) - np.log(ps))


def theta_diagnostic(z, train_priors, test_priors):
    """Ratio of training-posterior to post-compensated posterior per class.

    Evaluated in the factored closed form; ``z`` is one logit vector.
    """
    ps = _check_priors(train_priors, "train priors")
    pt = _check_priors(test_priors, "test priors")
    z = np.asarray(z, dtype=np.float64)
    w = softmax_rows(z)
    return (ps / pt) * np.sum((pt / ps) * w, axis=-1, keepdims=True)


def upsilon_exact(z, freq):
    """``(1/C) * sum_j (S_N/n_j) e^{z_j} / sum_j e^{z_j}`` for balanced test priors."""
    freq = _as_freq(freq)
    w = softmax_rows(np.asarray(z, dtype=np.float64))
    return np.sum((freq.total / freq.array) * w, axis=-1) / freq.n_classes


def upsilon_bound(freq):
    freq = _as_freq(freq)
    return freq.total / (freq.n_classes * freq.n_min)
