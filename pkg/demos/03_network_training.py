"""Training the deep-and-wide multi-instance network on a toy problem.

Eight hand-made scans, dropout off, a few hundred epochs: the loss should
collapse toward zero (the optimizer/loss plumbing at work), and the risk
of a scan is exactly the max over its nodule branch scores.
"""

import numpy as np

from lungrisk import nnet
from lungrisk.preprocess import NodulePatch, ScanExample

rng = np.random.default_rng(2)

examples = []
for i in range(8):
    label = i % 2
    planes = rng.random((3, 28, 28)) * 0.25 + 0.55 * label     # positives brighter
    meta = rng.normal(size=5) + np.r_[3.0 * label, np.zeros(4)]
    patches = [NodulePatch(planes=planes, metadata=meta)]
    patches += [NodulePatch.empty(5) for _ in range(9)]
    examples.append(ScanExample(scan_id=f"toy{i}", patches=patches, label=label))

config = nnet.NNetConfig(dropout_rate=0.0, epochs=300, batch_size=2, seed=3)
result = nnet.train(config, examples)
history = result.loss_history
print("loss: epoch 0:", round(history[0], 4),
      " epoch 150:", round(history[150], 4),
      " epoch 299:", round(history[-1], 4))

# multi-instance semantics: patient risk is the max branch score
params = result.params
ex = examples[1]
branch = nnet.forward_branch(params, ex.patches[0], "infer")
risk = nnet.forward_scan(params, ex, "infer")
print("single unmasked branch:", round(branch, 4), "== scan risk:", round(risk, 4))

# persistence: the weight file round-trips bit-exactly
import tempfile
from pathlib import Path

with tempfile.TemporaryDirectory() as td:
    path = Path(td) / "toy.lrnn"
    nnet.save_params(params, path, result.metadata_stats)
    reloaded = nnet.load_params(path)
    print("save/load risk identical:",
          nnet.forward_scan(reloaded, ex, "infer") == risk)
