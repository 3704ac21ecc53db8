"""A reduced version of the simulation study on a 6x6 lattice with 3 replicates.

Run with ``python demos/small_study.py [outdir]``; the four study CSV files
are written to ``outdir`` (default ``study_out``).
"""

import sys
from dataclasses import replace

from gcstar.simulation import run_study, scenarios_for_profile, summarize, write_study

outdir = sys.argv[1] if len(sys.argv) > 1 else "study_out"
scen = [replace(s, n1=6, n2=6, n_reps=3) for s in scenarios_for_profile("desk", alphas=(0.4, 1.5))]
report = run_study(scen, models=("gc", "poisson"))
for row in summarize(report):
    print(f"alpha {row['alpha_true']:.1f}  {row['model']:8s} median DIC {row['median_dic']:8.2f}"
          f"  median alpha-hat {row['median_alpha']:.3f}")
for path in write_study(report, outdir):
    print("wrote", path)
