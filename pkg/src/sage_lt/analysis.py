"""Verification and study tooling.

* the eight-term expansion of un-normalized attention ``(Q K^T) V`` over a
  split input ``f = [f1, f2]``
* a Gaussian-mixture study of the train/test marginal ratio per class
* raw attention-map export
* per-block parameter counts for common lightweight fine-tuning modules
"""
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import encoder as enc
from . import sg_adapter
from .sg_adapter import build_guidance

# ---------------------------------------------------------------------------
# attention expansion


def msa_expansion_terms(f1, f2, Wq, Wk, Wv):
    """The eight products ``(f_a Wq_a)(f_b Wk_b)^T (f_c Wv_c)`` for a, b, c in {1, 2}.

    ``W*`` are ``(d, d_k)`` and are split row-wise into halves matching
    ``f1`` and ``f2``. Returned as a dict keyed by ``(a, b, c)``.
    """
    h = f1.shape[-1]
    halves = {
        "q": (Wq[:h], Wq[h:]),
        "k": (Wk[:h], Wk[h:]),
        "v": (Wv[:h], Wv[h:]),
    }
    fs = (f1, f2)
    terms = {}
    for a, b, c in itertools.product((1, 2), repeat=3):
        q = fs[a - 1] @ halves["q"][a - 1]
        k = fs[b - 1] @ halves["k"][b - 1]
        v = fs[c - 1] @ halves["v"][c - 1]
        terms[(a, b, c)] = q @ k.T @ v
    return terms


def msa_decomposition_check(d, d_k, b, seed, zero_f1=False, zero_f2=False):
    """Max abs difference between ``(Q K^T) V`` and the sum of its eight terms.

    Softmax and the ``1/sqrt(d_k)`` scale are left out, as in the expansion.
    """
    if d % 2:
        raise ValueError("d must be even to split f into two halves")
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(b, d))
    if zero_f1:
        f[:, : d // 2] = 0.0
    if zero_f2:
        f[:, d // 2:] = 0.0
    Wq, Wk, Wv = (rng.normal(size=(d, d_k)) for _ in range(3))
    direct = (f @ Wq) @ (f @ Wk).T @ (f @ Wv)
    terms = msa_expansion_terms(f[:, : d // 2], f[:, d // 2:], Wq, Wk, Wv)
    return float(np.max(np.abs(direct - sum(terms.values()))))


# ---------------------------------------------------------------------------
# marginal ratio study


@dataclass
class GaussianClassModel:
    means: np.ndarray          # (C, d)
    covs: np.ndarray           # (C, d, d)
    train_priors: np.ndarray
    test_priors: np.ndarray = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        C = self.means.shape[0]
        if self.test_priors is None:
            self.test_priors = np.full(C, 1.0 / C)
        self.train_priors = np.asarray(self.train_priors, dtype=np.float64)
        self.test_priors = np.asarray(self.test_priors, dtype=np.float64)
        for name in ("train_priors", "test_priors"):
            p = getattr(self, name)
            if p.shape != (C,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be {C} non-negative values summing to 1")
        for k, S in enumerate(self.covs):
            _cholesky(S, k)

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def random(cls, counts, dim=2, spread=3.0, seed=0):
        """Means ~ N(0, spread^2 I), random SPD covariances with eigenvalues in [0.5, 1.5]."""
        rng = np.random.default_rng([seed, 31])
        C = len(counts)
        means = rng.normal(0.0, spread, size=(C, dim))
        covs = []
        for _ in range(C):
            Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            covs.append(Q @ np.diag(rng.uniform(0.5, 1.5, size=dim)) @ Q.T)
        n = np.asarray(counts, dtype=np.float64)
        return cls(means, np.stack(covs), n / n.sum())

    def sample(self, counts, rng):
        xs, ys = [], []
        for k, n in enumerate(counts):
            xs.append(rng.multivariate_normal(self.means[k], self.covs[k], size=int(n)))
            ys.append(np.full(int(n), k))
        return np.concatenate(xs), np.concatenate(ys)


def _cholesky(S, k):
    S = np.asarray(S)
    if not np.allclose(S, S.T, atol=1e-10):
        raise ValueError(f"covariance of class {k} is not symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"singular covariance for class {k}") from None


def gaussian_logpdf(x, mean, cov, k=0):
    """Row-wise log density of ``N(mean, cov)``."""
    L = _cholesky(cov, k)
    z = np.linalg.solve(L, (x - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + x.shape[1] * np.log(2 * np.pi))


def mixture_logpdf(x, means, covs, priors):
    """``log sum_k P(k) N(x; m_k, S_k)``, terms with zero prior dropped."""
    priors = np.asarray(priors, dtype=np.float64)
    cols = [np.log(p) + gaussian_logpdf(x, means[k], covs[k], k)
            for k, p in enumerate(priors) if p > 0]
    return logsumexp(np.stack(cols, axis=1), axis=1)


def _fit_gaussians(x, y, C):
    means = np.stack([x[y == k].mean(axis=0) for k in range(C)])
    covs = np.stack([np.cov(x[y == k], rowvar=False).reshape(x.shape[1], x.shape[1])
                     for k in range(C)])
    return means, covs


def pearson(a, b):
    """``(r, p, degenerate)``; degenerate when either series is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None, None, True
    res = stats.pearsonr(a, b)
    return float(res.statistic), float(res.pvalue), False


def linear_map(values, target):
    """Min-max rescale ``values`` onto the range of ``target`` (display only)."""
    v = np.asarray(values, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if np.ptp(v) == 0:
        return np.full_like(v, t.mean())
    return t.min() + (v - v.min()) / np.ptp(v) * np.ptp(t)


@dataclass
class RatioStudyResult:
    ratios: list
    counts: list
    r: float = None
    p: float = None
    degenerate: bool = False
    mapped_sizes: list = field(default_factory=list)
    best_mu: float = None
    best_gamma: float = None
    gamma_grid: list = field(default_factory=list)
    mu_grid: list = field(default_factory=list)
    fit_error: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(self.__dict__, indent=1, sort_keys=True)


def marginal_ratio_study(model, counts, gamma_grid=(0.0, 0.05, 0.1, 0.2),
                         mu_grid=(0.25, 0.5, 1.0, 2.0), seed=0, test_per_class=200):
    """Per-class mean of ``P'_s(x) / P_t(x)`` over test samples of that class.

    Class-conditional Gaussians are re-estimated from a draw with the
    long-tailed ``counts`` (giving ``P'_s`` with priors ``n / S_N``) and from a
    balanced draw (giving ``P_t`` with the model's test priors). Both
    mixtures are evaluated analytically at fresh balanced test samples.
    The ratios are correlated with class size and fitted to ``mu * n**gamma``
    over the grids by squared error in log space.
    """
    counts = [int(c) for c in counts]
    C = model.n_classes
    if len(counts) != C:
        raise ValueError(f"{len(counts)} counts for a {C}-class model")
    if min(counts) <= model.dim:
        raise ValueError(f"each class needs more than {model.dim} samples to estimate a covariance")
    rng = np.random.default_rng([seed, 41])
    n = np.asarray(counts, dtype=np.float64)

    x_tr, y_tr = model.sample(counts, rng)
    m_s, S_s = _fit_gaussians(x_tr, y_tr, C)
    x_bal, y_bal = model.sample([test_per_class] * C, rng)
    m_t, S_t = _fit_gaussians(x_bal, y_bal, C)
    x_te, y_te = model.sample([test_per_class] * C, rng)

    log_ratio = (mixture_logpdf(x_te, m_s, S_s, n / n.sum())
                 - mixture_logpdf(x_te, m_t, S_t, model.test_priors))
    ratio = np.exp(log_ratio)
    per_class = np.array([ratio[y_te == k].mean() for k in range(C)])

    r, p, degenerate = pearson(per_class, n)
    gamma_grid = [float(g) for g in gamma_grid]
    mu_grid = [float(m) for m in mu_grid]
    err = np.array([[float(np.sum((np.log(per_class) - np.log(mu) - g * np.log(n)) ** 2))
                     for g in gamma_grid] for mu in mu_grid])
    i, j = np.unravel_index(np.argmin(err), err.shape)
    return RatioStudyResult(
        ratios=per_class.tolist(), counts=counts, r=r, p=p, degenerate=degenerate,
        mapped_sizes=linear_map(n, per_class).tolist(),
        best_mu=mu_grid[i], best_gamma=gamma_grid[j],
        gamma_grid=gamma_grid, mu_grid=mu_grid, fit_error=err.tolist(),
    )


def write_study(path, result):
    with open(path, "w") as fh:
        fh.write(result.to_json())


# ---------------------------------------------------------------------------
# attention export


def _attention_maps(images, params, config, guidance):
    _, att, _ = enc.encode(images, params, config, guidance)
    return att.transpose(1, 0, 2, 3, 4)   # (b, L, h, T, T)


def export_attention(model, bundle, samples, out_dir):
    """Write attention maps for the foundation and the fine-tuned model.

    Per sample and source: ``{source}_{i:04d}.bin`` holds ``(L, h, T, T)`` and
    ``{source}_{i:04d}_cls.bin`` the CLS query row ``(L, h, T)``, both
    little-endian float64. ``index.json`` lists every file with its shape.
    """
    os.makedirs(out_dir, exist_ok=True)
    images = np.asarray(samples, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    tuned_params = {**bundle.params, **model.adapter_params()}
    guidance = build_guidance(model.psi["cls.W"]) if model.config.mode == "sage" else None
    sources = {
        "foundation": _attention_maps(images, bundle.params, bundle.config, None),
        "finetuned": _attention_maps(images, tuned_params, model.config, guidance),
    }
    index = {"dtype": "<f8", "layout": "L,h,T,T", "files": []}
    for source, maps in sources.items():
        for i, m in enumerate(maps):
            stem = f"{source}_{i:04d}"
            for suffix, arr in (("", m), ("_cls", m[:, :, 0, :])):
                name = stem + suffix + ".bin"
                np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(out_dir, name))
                index["files"].append({"file": name, "source": source, "sample": i,
                                       "kind": "cls_row" if suffix else "full",
                                       "shape": list(arr.shape)})
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return index


def load_attention(out_dir):
    """Read an archive back as ``{file name: array}``."""
    with open(os.path.join(out_dir, "index.json")) as fh:
        index = json.load(fh)
    return {e["file"]: np.fromfile(os.path.join(out_dir, e["file"]), dtype="<f8").reshape(e["shape"])
            for e in index["files"]}


# ---------------------------------------------------------------------------
# parameter table


def parameter_table(d, r, H=1, p=1, L=1):
    """Per-block and ``L``-block learnable parameter counts.

    The AdaptFormer and SG-Adapter rows are cross-checked against arrays
    actually allocated by the encoder and adapter initializers.
    """
    if min(d, r, H, p, L) < 1:
        raise ValueError("all arguments must be positive")
    if d % H:
        raise ValueError(f"d={d} is not divisible by H={H}")
    rows = {
        "BitFit": ("11d", 11 * d),
        "VPT": ("pd", p * d),
        "Adapter": ("(2r+3)d + r", (2 * r + 3) * d + r),
        "LoRA": ("4rd", 4 * r * d),
        "AdaptFormer": ("(2r+3)d + r + 1", enc.adaptformer_count(d, r)),
        "SG-Adapter": ("(5r+d+4)d + 3r + 2", sg_adapter.count_params(d, r)),
    }
    rng = np.random.default_rng(0)
    allocated = {"SG-Adapter": sg_adapter.allocated_count(sg_adapter.init_sg_params(d, r, rng))}
    if r < d:
        allocated["AdaptFormer"] = allocated_adaptformer(d, r, rng)
    table = {}
    for name, (formula, count) in rows.items():
        entry = {"formula": formula, "per_block": int(count), "total": int(count * L)}
        if name in allocated:
            if allocated[name] != count:
                raise AssertionError(f"{name}: formula {count} != allocated {allocated[name]}")
            entry["allocated"] = allocated[name]
        table[name] = entry
    return table


def allocated_adaptformer(d, r, rng=None):
    """Size of one block's AdaptFormer arrays as allocated by the encoder."""
    if r >= d:
        raise ValueError("AdaptFormer allocation needs r < d")
    rng = np.random.default_rng(0) if rng is None else rng
    config = enc.EncoderConfig(depth=1, width=d, heads=1, bottleneck=r, grid=1, patch=1,
                               mode="adaptformer")
    return int(sum(v.size for v in enc.init_adapters(config, rng).values()))
