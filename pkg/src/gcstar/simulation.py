"""Simulation study: gamma-count data on a lattice with a smooth and a spatial effect.

Responses follow ``Y ~ GC(alpha, alpha exp(f_z(z) + f_s(s1, s2)))`` with
``f_z(z) = sin(z)`` and a two-bump surface ``f_s``.  Each replicate is fitted
with several likelihoods using intercept + RW2(z) + RW2D(s); the function
estimates are compared to the truth after centering both.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .criteria import mse_curve, se_alpha
from .errors import GCStarError
from .gammacount import sample_counts
from .inference import InferenceOptions, fit
from .model import Dataset, ModelSpec, SmoothTerm, SpatialTerm, build_design
from .priors import PriorConfig

PAPER_ALPHAS = (0.4, 1.0, 1.5)
Z_GRID = np.linspace(-1.0, 1.0, 50)


@dataclass(frozen=True)
class Scenario:
    alpha_true: float
    n1: int = 10
    n2: int = 10
    n_reps: int = 20
    seed: int = 2024
    n_bins: int = 25

    def __post_init__(self):
        if not self.alpha_true > 0:
            raise GCStarError("alpha_true must be > 0")
        if self.n1 < 3 or self.n2 < 3 or self.n_reps < 1:
            raise GCStarError("grid must be at least 3 x 3 and n_reps >= 1")

    @property
    def n(self) -> int:
        return self.n1 * self.n2


PROFILES = {"desk": {"n1": 10, "n2": 10, "n_reps": 20},
            "paper": {"n1": 20, "n2": 20, "n_reps": 100}}


def scenarios_for_profile(profile: str = "desk", alphas=PAPER_ALPHAS, seed: int = 2024) -> list:
    if profile not in PROFILES:
        raise GCStarError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return [Scenario(a, seed=seed, **PROFILES[profile]) for a in alphas]


def f_z(z):
    return np.sin(z)


def f_s(s1, s2):
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    return (np.exp((-(s1 - 0.25) ** 2 - (s2 - 0.25) ** 2) / 0.1)
            + 0.5 * np.exp((-(s1 - 0.7) ** 2 - (s2 - 0.7) ** 2) / 0.07))


def true_functions(z, s1, s2, center: bool = False):
    """``(f_z(z), f_s(s1, s2))``; with ``center=True`` each has its mean removed."""
    fz, fs = f_z(np.asarray(z, dtype=float)), f_s(s1, s2)
    if center:
        fz, fs = fz - fz.mean(), fs - fs.mean()
    return fz, fs


def lattice(n1: int, n2: int) -> np.ndarray:
    """Row-major lattice coordinates on the unit square (first axis varies slowest)."""
    s1, s2 = np.meshgrid(np.linspace(0, 1, n1), np.linspace(0, 1, n2), indexing="ij")
    return np.column_stack([s1.ravel(), s2.ravel()])


def gen_replicate(sc: Scenario, r: int) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence([sc.seed, r]))
    coords = lattice(sc.n1, sc.n2)
    z = rng.uniform(-1, 1, sc.n)
    eta = f_z(z) + f_s(coords[:, 0], coords[:, 1])
    y = sample_counts(sc.alpha_true, sc.alpha_true * np.exp(eta), rng)
    return Dataset(y.astype(float), covariates={"z": z}, coords=coords)


def study_spec(sc: Scenario, kind: str) -> ModelSpec:
    return ModelSpec(kind, intercept=True, smooth_terms=(SmoothTerm("z", "rw2", sc.n_bins),),
                     spatial=SpatialTerm("rw2d", sc.n1, sc.n2))


def _fit_one(args):
    sc, r, kind, options, priors = args
    data = gen_replicate(sc, r)
    row = {"alpha_true": sc.alpha_true, "rep": r, "model": kind, "status": "ok",
           "alpha_mean": math.nan, "alpha_q025": math.nan, "alpha_q975": math.nan,
           "se_alpha": math.nan, "mse_fz": math.nan, "mse_fs": math.nan,
           "dic": math.nan, "waic": math.nan, "boundary": ""}
    fz_c, fs_c = true_functions(Z_GRID, data.coords[:, 0], data.coords[:, 1], center=True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            asm = build_design(study_spec(sc, kind), data)
            res = fit(asm, kind, priors, replace(options, seed=options.seed + r))
    except (GCStarError, ValueError, np.linalg.LinAlgError) as exc:
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        return row, None, None
    mean_z, _, _ = res.block_summary("f(z)")
    mids = asm.block("f(z)").info["midpoints"]
    est_z = np.interp(Z_GRID, mids, mean_z)
    est_z = est_z - est_z.mean()
    est_s, _, _ = res.block_summary("spatial")
    # the lattice is compiled in row-major order, matching the data ordering
    est_s = est_s - est_s.mean()
    err_z = (est_z - fz_c) ** 2
    err_s = (est_s - fs_c) ** 2
    row["mse_fz"] = float(err_z.mean())
    row["mse_fs"] = float(err_s.mean())
    crit = res.summary.criteria
    row["dic"] = crit["dic"]["dic"]
    row["waic"] = crit["waic"]["waic"]
    if kind == "gc":
        h = res.hyper("alpha")
        row.update(alpha_mean=h.mean, alpha_q025=float(h.quantiles[0]),
                   alpha_q975=float(h.quantiles[2]), se_alpha=se_alpha(h.mean, sc.alpha_true))
    elif kind in ("negbin", "genpoisson"):
        h = res.hyper(res.problem.free[0].name)
        lo, hi = (0.01, 1e4) if kind == "negbin" else (1e-4, 0.99)
        if h.mean < lo or h.mean > hi:
            row["boundary"] = f"{h.name}={h.mean:.4g}"
    return row, est_z, est_s


def default_workers() -> int:
    env = os.environ.get("GCSTAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise GCStarError(f"GCSTAR_THREADS must be an integer, got {env!r}") from None
    return 1


@dataclass(frozen=True, eq=False)
class StudyReport:
    rows: list
    mse_fz: dict  # (alpha_true, model) -> pointwise MSE over Z_GRID
    mse_fs: dict  # (alpha_true, model) -> pointwise MSE over lattice cells
    coords: dict  # alpha_true -> lattice coordinates
    n_failed: int


def run_study(scenarios, models=("gc", "poisson", "negbin", "genpoisson"),
              options: InferenceOptions | None = None, priors: PriorConfig | None = None,
              workers: int | None = None, progress=None) -> StudyReport:
    if not models:
        raise GCStarError("at least one model is required")
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    options = options or InferenceOptions(n_draws=500)
    workers = workers or default_workers()
    tasks = [(sc, r, kind, options, priors) for sc in scenarios for r in range(sc.n_reps)
             for kind in models]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fit_one, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_fit_one(t))
            if progress is not None:
                progress(len(results), len(tasks))
    rows = [r[0] for r in results]
    mse_fz, mse_fs, coords = {}, {}, {}
    for sc in scenarios:
        c = lattice(sc.n1, sc.n2)
        coords[sc.alpha_true] = c
        fz_c, fs_c = true_functions(Z_GRID, c[:, 0], c[:, 1], center=True)
        for kind in models:
            ez = [res[1] for t, res in zip(tasks, results)
                  if t[0] is sc and t[2] == kind and res[1] is not None]
            es = [res[2] for t, res in zip(tasks, results)
                  if t[0] is sc and t[2] == kind and res[2] is not None]
            if ez:
                mse_fz[(sc.alpha_true, kind)] = mse_curve(np.array(ez), fz_c)["mse"]
                mse_fs[(sc.alpha_true, kind)] = mse_curve(np.array(es), fs_c)["mse"]
    n_failed = sum(1 for r in rows if r["status"] != "ok")
    return StudyReport(rows, mse_fz, mse_fs, coords, n_failed)


def summarize(report: StudyReport) -> list:
    out = []
    keys = sorted({(r["alpha_true"], r["model"]) for r in report.rows},
                  key=lambda k: (k[0], k[1]))
    for a, m in keys:
        rs = [r for r in report.rows if r["alpha_true"] == a and r["model"] == m]
        ok = [r for r in rs if r["status"] == "ok"]

        def med(col):
            v = np.array([r[col] for r in ok], dtype=float)
            v = v[np.isfinite(v)]
            return float(np.median(v)) if len(v) else math.nan

        cover = [r["alpha_q025"] <= a <= r["alpha_q975"] for r in ok if np.isfinite(r["alpha_q025"])]
        out.append({"alpha_true": a, "model": m, "n_ok": len(ok), "n_failed": len(rs) - len(ok),
                    "median_dic": med("dic"), "median_waic": med("waic"),
                    "median_mse_fz": med("mse_fz"), "median_mse_fs": med("mse_fs"),
                    "median_alpha": med("alpha_mean"), "median_se_alpha": med("se_alpha"),
                    "alpha_coverage": float(np.mean(cover)) if cover else math.nan,
                    "n_boundary": sum(1 for r in ok if r["boundary"])})
    return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ""
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_study(report: StudyReport, outdir) -> list:
    """Write the four study CSVs; returns their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cols = ["alpha_true", "rep", "model", "status", "alpha_mean", "alpha_q025", "alpha_q975",
            "se_alpha", "mse_fz", "mse_fs", "dic", "waic", "boundary"]
    p1 = outdir / "study_replicates.csv"
    _write_csv(p1, cols, [[r[c] for c in cols] for r in report.rows])
    summ = summarize(report)
    scols = list(summ[0]) if summ else ["alpha_true", "model"]
    p2 = outdir / "study_summary.csv"
    _write_csv(p2, scols, [[s[c] for c in scols] for s in summ])
    p3 = outdir / "mse_fz.csv"
    _write_csv(p3, ["alpha_true", "model", "z", "mse"],
               [[a, m, float(z), float(v)] for (a, m), mse in sorted(report.mse_fz.items())
                for z, v in zip(Z_GRID, mse)])
    p4 = outdir / "mse_fs_grid.csv"
    _write_csv(p4, ["alpha_true", "model", "cell", "s1", "s2", "mse"],
               [[a, m, i, float(report.coords[a][i, 0]), float(report.coords[a][i, 1]), float(v)]
                for (a, m), mse in sorted(report.mse_fs.items()) for i, v in enumerate(mse)])
    return [p1, p2, p3, p4]
