"""Fit a gamma-count model with a linear effect and an RW2 smooth, then
compare it with Poisson and negative binomial fits on the same data.

Run with ``python demos/fit_smooth.py``.
"""

import numpy as np

from gcstar import gammacount as gc
from gcstar.inference import InferenceOptions, fit
from gcstar.model import Dataset, ModelSpec, SmoothTerm, build_design

rng = np.random.default_rng(42)
n = 150
x = rng.uniform(-1, 1, n)
z = rng.uniform(-1, 1, n)
# under-dispersed counts (alpha = 2)
y = gc.sample_counts(2.0, np.exp(1.0 + 0.5 * x + np.sin(2 * z)), rng).astype(float)
data = Dataset(y, covariates={"x": x, "z": z})

opts = InferenceOptions(n_draws=2000, seed=1)
for kind in ("gc", "poisson", "negbin"):
    spec = ModelSpec(kind, linear_terms=("x",), smooth_terms=(SmoothTerm("z", "rw2", 15),))
    res = fit(build_design(spec, data), kind, options=opts)
    crit = res.summary.criteria
    print(f"{kind:8s} DIC {crit['dic']['dic']:8.2f}   WAIC {crit['waic']['waic']:8.2f}")
    if kind == "gc":
        a = res.hyper("alpha")
        q = a.quantiles
        print(f"         alpha posterior mean {a.mean:.3f}, 95% interval ({q[0]:.3f}, {q[-1]:.3f})")
        lat = res.summary.latent
        print(f"         slope of x: {lat.mean[1]:.3f} (sd {lat.sd[1]:.3f}); truth 0.5")
