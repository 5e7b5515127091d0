"""
Equal error rate and minimum detection cost
===========================================

Scores from two overlapping Gaussians stand in for target and nontarget
trials. Moving the target scores up lowers both metrics.
"""

import numpy as np

from metaspeaker import compute_eer, compute_min_dcf

rng = np.random.default_rng(0)
n = 2000
labels = np.r_[np.ones(n, dtype=int), np.zeros(n, dtype=int)]

for shift in (0.5, 1.0, 2.0, 3.0):
    scores = np.r_[rng.normal(shift, 1.0, n), rng.normal(0.0, 1.0, n)]
    eer, thr = compute_eer(scores, labels)
    print(f"separation {shift:.1f}: EER {100 * eer:5.2f}% at threshold {thr:+.3f}, minDCF(0.01) {compute_min_dcf(scores, labels):.3f}")

## A worked example: one nontarget outscores one target
print(compute_eer([0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0]))
