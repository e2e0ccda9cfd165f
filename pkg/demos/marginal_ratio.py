"""Per-class train/test marginal ratio against class size on a Gaussian mixture.

    python3 demos/marginal_ratio.py [seed]
"""
import sys

from sage_lt.analysis import GaussianClassModel, marginal_ratio_study
from sage_lt.data import LongTailSpec, longtail_counts

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
counts = longtail_counts(LongTailSpec(10, 500, 100))
res = marginal_ratio_study(GaussianClassModel.random(counts, seed=seed), counts, seed=seed)

print(f"{'n':>5} {'ratio':>8} {'mapped n':>9}")
for n, r, m in zip(res.counts, res.ratios, res.mapped_sizes):
    print(f"{n:5d} {r:8.3f} {m:9.3f}")
print(f"Pearson r = {res.r:.3f}, p = {res.p:.3g}")
print(f"best grid fit: mu = {res.best_mu}, gamma = {res.best_gamma}")
