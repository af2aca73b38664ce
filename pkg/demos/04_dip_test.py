"""
Is the residual multimodal?
===========================

Hartigan's dip on synthetic residual segments, then the three ways of
pooling per-segment p-values.
"""

import numpy as np

from residiff.multimodality import combine_pvalues, dip_pvalue, segment_and_test

rng = np.random.default_rng(0)
one = rng.normal(0, 1, 500)
two = np.concatenate([rng.normal(-3, 0.5, 250), rng.normal(3, 0.5, 250)])
for label, x in (("gaussian", one), ("two bumps", two)):
    r = dip_pvalue(x)
    print("%-9s dip %.4f  p %.4f" % (label, r.dip, r.p_value))

print({m: round(combine_pvalues([0.01, 0.04, 0.5], m).value, 5) for m in ("fisher", "stouffer", "tippett")})

# ten repeated flights along a straight path; the y residual switches between two levels
t = np.linspace(0, 1, 400)
p_d = np.stack([t, 0 * t, 1 + 0 * t], axis=1)
runs = []
for _ in range(10):
    h = rng.normal(0, 0.3, (400, 3))
    h[:, 1] += np.where(rng.random(400) < 0.5, -2.0, 2.0)
    runs.append((p_d, h))
report = segment_and_test(runs, n_segments=20, bootstrap_count=500)
print("combined fisher p per axis:", ["%.2g" % p for p in report["combined"]["fisher"]])
