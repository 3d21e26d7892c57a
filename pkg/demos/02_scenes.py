"""The planted co-occurrence scenes and the exact mIoU evaluator."""
import numpy as np

from idrnet.scenes import DEFAULT_RULES, area_fractions, generate, make_dataset, miou

rule = DEFAULT_RULES[0]
print("cue", rule.cue, "dependent", rule.dependent, "look-alike", rule.ambiguity)

s = generate(DEFAULT_RULES, 6, 64, 64, seed=3)
print("image", s.image.shape, s.image.dtype, "classes present", np.unique(s.gt))

# dependent and look-alike share a colour; only the cue band tells them apart
samples = make_dataset(400, DEFAULT_RULES, 6, 64, 64, master_seed=0)
with_b = sum((x.gt == rule.dependent).any() for x in samples)
b_without_a = sum((x.gt == rule.dependent).any() and not (x.gt == rule.cue).any() for x in samples)
print(f"{with_b} scenes hold the dependent class, {b_without_a} of them without the cue")

tally = np.bincount(np.concatenate([x.gt.ravel() for x in samples]), minlength=6) / (400 * 64 * 64)
print("empirical area fractions", tally.round(4))
print("configured area fractions", area_fractions(DEFAULT_RULES, 6, 64, 64).round(4))

# mIoU is accumulated over the whole set, in exact rationals
report = miou([np.array([[0, 0], [0, 1]])], [np.array([[0, 0], [1, 1]])], 2)
print("per-class IoU", report.iou, "mIoU", report.miou)

# the context-free trap: always answering "look-alike" on the blob
preds = []
for x in samples[:50]:
    p = x.gt.copy()
    p[p == rule.dependent] = rule.ambiguity
    preds.append(p)
print("blob-blind mIoU", float(miou(preds, [x.gt for x in samples[:50]], 6).miou))
