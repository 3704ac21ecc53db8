"""Tour of the gamma-count distribution: dispersion, moments and sampling.

Run with ``python demos/distribution.py``.
"""

import numpy as np

from gcstar import gammacount as gc

rng = np.random.default_rng(0)
beta = 4.0
print(f"{'alpha':>6} {'class':>14} {'mean':>8} {'var':>8} {'VMR':>6} {'MC mean':>8}")
for alpha in (0.4, 0.7, 1.0, 1.5, 3.0):
    p = gc.GCParams(alpha, beta)
    m, v = gc.mean(p), gc.variance(p)
    draws = gc.sample_counts(alpha, beta, rng, size=200_000)
    cls = gc.classify_dispersion(alpha).name.lower()
    print(f"{alpha:6.2f} {cls:>14} {m:8.4f} {v:8.4f} {v / m:6.3f} {draws.mean():8.4f}")

# alpha = 1 is exactly Poisson
n = np.arange(10)
print("\npmf at alpha=1 :", np.round(gc.pmf(n, gc.GCParams(1.0, beta)), 5))

# The waiting-time hazard falls for alpha < 1 and rises for alpha > 1.
u = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
for alpha in (0.4, 1.5):
    print(f"hazard alpha={alpha}:", np.round(gc.gamma_hazard(u, alpha, 1.0), 4))
