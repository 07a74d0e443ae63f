# The synthetic sparse-annotation benchmark: generation, class balance,
# AVA-style CSV output and the batch sampler.
# Run: python3 tutorials/02_synthetic_benchmark.py [out_dir]

# %%
import sys
import tempfile

import numpy as np

from stad.data import CLASS_NAMES, DataConfig, class_histogram, generate_synthetic, load_dataset, sample_batches, save_dataset

cfg = DataConfig(num_videos=40, num_test_videos=10)
ds = generate_synthetic(cfg, seed=0)
print(len(ds.train.labeled), "labeled keyframes,", len(ds.train.unlabeled), "unlabeled frames")

# %% long tail
hist = class_histogram(ds.train, cfg.num_classes)
for name, n in zip(CLASS_NAMES, hist):
    print(f"{name:<11} {n:4d} " + "#" * int(n // 4))

# %% one unlabeled frame and its two neighbours
c = ds.train.unlabeled[3]
print(c.video, "frame", c.frame, "between keyframes at", c.left.frame_time, "s and", c.right.frame_time, "s")
print("left labels", c.left.labels.astype(int).tolist())

# %% save, reload
out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
save_dataset(ds, out)
back = load_dataset(out)
print("round trip ok:", back.train.labeled == ds.train.labeled, "->", out)

# %% 1:1 labeled/unlabeled batches
lab, unl = next(sample_batches(ds.train, 1.0, 8, np.random.default_rng(0)))
print("batch", lab, unl)
