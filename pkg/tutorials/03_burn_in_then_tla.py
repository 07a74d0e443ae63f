# A short end-to-end run: supervised burn-in, a few teacher-student steps with
# temporal label assignment, frame-mAP, and a look at the pseudo-labels.
# Kept small so it finishes in a couple of minutes; see README for the full-size runs.
# Run: python3 tutorials/03_burn_in_then_tla.py

# %%
from stad.data import DataConfig, generate_synthetic
from stad.trainer import ClipSource, SSADConfig, TrainConfig, burn_in, evaluate, pseudo_label, run_ssad

ds = generate_synthetic(DataConfig(num_videos=40, num_test_videos=10), seed=0)
train = ClipSource(ds.videos, ds.train)
test = ClipSource(ds.videos, ds.test)

# %% burn-in on keyframes only
tcfg = TrainConfig(iterations=400, warmup_iters=50)
state = burn_in(train, tcfg, seed=0)
print("burn-in frame-mAP", round(evaluate(state.student, test).map, 3))
print("unlabeled clips read during burn-in:", train.unlabeled_reads)

# %% teacher-student stage
scfg = SSADConfig(iterations=40, ema_decay=0.99, strategy="tla")
ssad = run_ssad(state, train, tcfg, scfg)
print("after SSAD, teacher frame-mAP", round(evaluate(ssad.teacher, test).map, 3))

# %% pseudo-labels for a few unlabeled frames
for i in range(0, 40, 10):
    clip, left, right, t = train.unlabeled(i)
    p = pseudo_label(ssad, clip, left, right, t, scfg)
    print(f"t={t:.3f}s", len(p), "boxes,", int(p.background.sum()), "background")
