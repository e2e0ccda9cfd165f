"""How the compensation factor reshapes the logit offsets, plus the prior diagnostics."""
import numpy as np

from sage_lt.data import LongTailSpec, longtail_counts
from sage_lt.loss import (
    ClassFrequencies, LossConfig, cf_log_offsets, compensation_factors, post_compensate,
    theta_diagnostic, upsilon_bound, upsilon_exact,
)

n = longtail_counts(LongTailSpec(10, 500, 100))
freq = ClassFrequencies(n)
print("counts:", n)
for gamma in (0.0, 0.05, 0.2):
    cfg = LossConfig(gamma=gamma)
    off = cf_log_offsets(freq, cfg)
    # only differences between offsets matter inside the softmax
    print(f"gamma={gamma:<5} Lambda={np.round(compensation_factors(freq, cfg), 3).tolist()}")
    print(f"{'':12}relative offsets={np.round(off - off[0], 3).tolist()}")

z = np.array([1.0, 2.0])
print("\npost-compensation of [1, 2], train priors [0.9, 0.1] -> balanced:",
      post_compensate(z, [0.9, 0.1], [0.5, 0.5]))
print("theta at z=[0, 0]:", theta_diagnostic([0.0, 0.0], [0.9, 0.1], [0.5, 0.5]))

rng = np.random.default_rng(0)
u = upsilon_exact(rng.normal(size=(10_000, 2)) * 10, [100, 10])
print(f"upsilon over 10k draws on n=[100, 10]: max {u.max():.4f}, bound {upsilon_bound([100, 10])}")
