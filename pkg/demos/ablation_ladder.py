"""Train the five-row component ladder on the default long-tailed task.

Rows switch on, in order: the semantic-guided adapter, the text-derived
classifier init, the compensation-factor loss and FIT. Prints final
accuracy per row, median over seeds.

    python3 demos/ablation_ladder.py [n_seeds]
"""
import sys
from dataclasses import replace

import numpy as np

from sage_lt.cli import ladder_configs
from sage_lt.data import SyntheticTaskSpec, build_foundation, generate, split_groups
from sage_lt.trainer import TrainConfig, train

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
task = SyntheticTaskSpec()
bundle = build_foundation(task)
train_set, test_set = generate(task)
groups = split_groups(train_set.counts)
print("class counts:", train_set.counts)
print("groups:      ", groups)

print(f"\n{'row':<14}{'all':>7}{'head':>7}{'med':>7}{'tail':>7}")
for i, name, cfg in ladder_configs(TrainConfig()):
    finals = [train(replace(cfg, seed=s), bundle, train_set, test_set, groups)[1][-1] for s in seeds]
    med = lambda key: np.median([getattr(m, key) for m in finals])
    print(f"{i} {name:<12}{med('acc_all'):7.3f}{med('acc_head'):7.3f}{med('acc_med'):7.3f}{med('acc_tail'):7.3f}")
