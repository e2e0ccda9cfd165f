"""Fine-tune briefly, then dump attention maps for one test image per class.

    python3 demos/attention_export.py OUT_DIR
"""
import sys

import numpy as np

from sage_lt.analysis import export_attention, load_attention
from sage_lt.data import SyntheticTaskSpec, build_foundation, generate
from sage_lt.trainer import TrainConfig, train

out = sys.argv[1] if len(sys.argv) > 1 else "attention_demo"
task = SyntheticTaskSpec()
bundle = build_foundation(task)
train_set, test_set = generate(task)
model, history = train(TrainConfig(epochs=3), bundle, train_set, test_set)
print(f"acc_all after 3 epochs: {history[-1].acc_all:.3f}")

pick = [int(np.flatnonzero(test_set.labels == c)[0]) for c in range(task.classes)]
index = export_attention(model, bundle, test_set.images[pick], out)
arrays = load_attention(out)
print(f"{len(index['files'])} arrays in {out}")
np.set_printoptions(precision=3, suppress=True)
# blocks have no LN in front of attention, so the pre-trained stub tends to
# put nearly all CLS attention on a single token per head
for c in (0, task.classes - 1):
    for source in ("foundation", "finetuned"):
        print(f"class {c} {source} CLS rows, last block:")
        print(arrays[f"{source}_{c:04d}_cls.bin"][-1])
