"""ROC curves, Mann-Whitney AUC, operating points, and the paired
permutation test used to compare two models on the same patients."""

import numpy as np

from lungrisk import evaluate as ev

rng = np.random.default_rng(5)

# a 200-scan cohort scored by two models of different quality
n = 200
labels = np.repeat([0, 1], n // 2)
latent = rng.normal(size=n) + 1.6 * labels
ids = [f"scan_{i:03d}" for i in range(n)]
strong = ev.ScoredCohort(scan_ids=ids, scores=latent + rng.normal(0, 0.3, n), labels=labels)
weak = ev.ScoredCohort(scan_ids=ids, scores=latent + rng.normal(0, 1.6, n), labels=labels)

print("strong model AUC:", round(ev.auc(strong), 4))
print("weak model AUC:  ", round(ev.auc(weak), 4))

curve = ev.roc_curve(strong)
print("ROC points:", len(curve.fpr), " first:", (curve.fpr[0], curve.tpr[0]),
      " last:", (curve.fpr[-1], curve.tpr[-1]))

print("sensitivity at specificity >= 0.80:",
      round(ev.sensitivity_at_specificity(strong, 0.80), 4))
print("specificity at sensitivity >= 0.84:",
      round(ev.specificity_at_sensitivity(strong, 0.84), 4))

# paired one-sided permutation test: is the strong model really better?
p = ev.permutation_test_auc(strong, weak, n_perm=5000, rng=np.random.default_rng(0))
print("one-sided permutation p-value (strong > weak):", round(p, 4))

p_self = ev.permutation_test_auc(strong, strong, n_perm=1000, rng=np.random.default_rng(0))
print("model against itself: p =", p_self, "(exactly 1.0 by construction)")

# report formatting, grouped by a category column
grouped = ev.ScoredCohort(scan_ids=ids, scores=strong.scores, labels=labels,
                          lungrads=list(rng.choice([2, 3, 4], size=n)))
print()
print(ev.format_report(ev.evaluate_cohort(grouped, group=True)))
