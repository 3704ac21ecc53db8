"""Command-line interface: ``gcstar fit | predict | simulate | dist``.

Model configuration is an INI file.  Recognized keys::

    [model]
    likelihood   = gc | poisson | negbin | genpoisson | gaussian
    intercept    = true
    linear       = x1, x2               (comma list)
    smooth       = z:rw2:25, w:rw1      (covariate[:rw1|rw2[:n_bins]])
    spatial      = none | rw2d | tps
    iid          = false
    scale_model  = true

    [mesh]                              (spatial settings)
    n1, n2       = lattice size for rw2d
    variant      = paper | squared_laplacian
    max_edge, hull_extension            (tps mesh; default from site extent)

    [priors]
    alpha_lambda, precision_u, precision_a, lik_hyper_u, lik_hyper_a,
    fixed_variance, intercept_variance

    [inference]
    grid_step, log_drop, mode = grid | ccd | empirical_bayes, newton_tol,
    newton_max_iter, n_pred_draws, n_draws, seed

    [fixed]                             (hyperparameters held constant)
    alpha = 1.0, tau[f(z)] = 10, ...

    [data]
    offset       = column used as additive log offset
    transform.<column> = log

    [simulation]                        (simulate only)
    n1, n2, n_reps, n_bins              (override the profile's scenario sizes)

Exit status: 0 success, 2 user error, 3 numerical failure.  ``GCSTAR_THREADS``
caps the worker processes used by ``simulate``; BLAS is pinned to one thread
so numeric outputs are byte-identical across runs.
"""

from __future__ import annotations

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import configparser  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import math  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import scipy  # noqa: E402

from . import gammacount as gcd  # noqa: E402
from .errors import ConvergenceError, DomainError, FactorizationError, GCStarError  # noqa: E402
from .inference import InferenceOptions, fit, posterior_sample, predict_counts  # noqa: E402
from .mesh import read_mesh, write_mesh  # noqa: E402
from .model import (ModelSpec, SmoothTerm, SpatialTerm, build_design, design_rows,  # noqa: E402
                    read_dataset_csv)
from .priors import PriorConfig  # noqa: E402

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
VERSION = "0.1.0"


class UserError(GCStarError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UserError(f"not a boolean: {v!r}")


def _list(v: str) -> list:
    return [t.strip() for t in v.split(",") if t.strip()]


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise UserError(f"{path}: {exc}") from None
    allowed = {"model", "mesh", "priors", "inference", "fixed", "data", "simulation"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise UserError(f"unknown config sections: {sorted(extra)}")
    return cp


def _section(cp, name):
    return dict(cp[name]) if cp.has_section(name) else {}


def spec_from_config(cp) -> ModelSpec:
    m = _section(cp, "model")
    known = {"likelihood", "intercept", "linear", "smooth", "spatial", "iid", "scale_model"}
    if set(m) - known:
        raise UserError(f"unknown [model] keys: {sorted(set(m) - known)}")
    mesh = _section(cp, "mesh")
    smooth = []
    for item in _list(m.get("smooth", "")):
        parts = item.split(":")
        try:
            smooth.append(SmoothTerm(parts[0], parts[1] if len(parts) > 1 else "rw2",
                                     int(parts[2]) if len(parts) > 2 else 25))
        except ValueError as exc:
            raise UserError(f"[model] smooth entry {item!r}: {exc}") from None
    spatial = None
    kind = m.get("spatial", "none").strip().lower()
    if kind == "rw2d":
        try:
            spatial = SpatialTerm("rw2d", int(mesh["n1"]), int(mesh["n2"]),
                                  mesh.get("variant", "paper"))
        except KeyError as exc:
            raise UserError(f"[mesh] {exc.args[0]} is required for spatial = rw2d") from None
    elif kind == "tps":
        spatial = SpatialTerm("tps", max_edge=float(mesh["max_edge"]) if "max_edge" in mesh else None,
                              hull_extension=float(mesh["hull_extension"])
                              if "hull_extension" in mesh else None)
    elif kind != "none":
        raise UserError(f"[model] spatial must be none, rw2d or tps, got {kind!r}")
    return ModelSpec(likelihood=m.get("likelihood", "gc").strip(),
                     intercept=_bool(m.get("intercept", "true")),
                     linear_terms=tuple(_list(m.get("linear", ""))), smooth_terms=tuple(smooth),
                     spatial=spatial, iid_term=_bool(m.get("iid", "false")),
                     scale_model=_bool(m.get("scale_model", "true")))


def config_from_spec(spec: ModelSpec) -> configparser.ConfigParser:
    """Normalized config text for a spec (inverse of :func:`spec_from_config`)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {
        "likelihood": spec.likelihood,
        "intercept": str(spec.intercept).lower(),
        "linear": ", ".join(spec.linear_terms),
        "smooth": ", ".join(f"{s.covariate}:{s.prior_kind}:{s.n_bins}" for s in spec.smooth_terms),
        "spatial": spec.spatial.kind if spec.spatial else "none",
        "iid": str(spec.iid_term).lower(),
        "scale_model": str(spec.scale_model).lower(),
    }
    if spec.spatial is not None:
        sp = spec.spatial
        if sp.kind == "rw2d":
            cp["mesh"] = {"n1": str(sp.n1), "n2": str(sp.n2), "variant": sp.variant}
        else:
            cp["mesh"] = {k: repr(float(v)) for k, v in (("max_edge", sp.max_edge),
                                                  ("hull_extension", sp.hull_extension))
                          if v is not None}
    return cp


def priors_from_config(cp) -> PriorConfig:
    try:
        return PriorConfig.from_dict(_section(cp, "priors"))
    except (DomainError, ValueError) as exc:
        raise UserError(f"[priors]: {exc}") from None


def options_from_config(cp, seed=None) -> InferenceOptions:
    d = _section(cp, "inference")
    types = {f.name: f.type for f in fields(InferenceOptions)}
    kw = {}
    for k, v in d.items():
        if k not in types:
            raise UserError(f"unknown [inference] key {k!r}")
        t = types[k]
        try:
            kw[k] = v.strip() if t == "str" else (int(v) if t == "int" else float(v))
        except ValueError:
            raise UserError(f"[inference] {k}: cannot parse {v!r}") from None
    if seed is not None:
        kw["seed"] = int(seed)
    try:
        return InferenceOptions(**kw)
    except DomainError as exc:
        raise UserError(f"[inference]: {exc}") from None


def fixed_from_config(cp) -> dict:
    out = {}
    for k, v in _section(cp, "fixed").items():
        try:
            out[k] = float(v)
        except ValueError:
            raise UserError(f"[fixed] {k}: cannot parse {v!r}") from None
    return out


def data_options(cp) -> tuple:
    d = _section(cp, "data")
    transforms, offset = {}, None
    for k, v in d.items():
        if k == "offset":
            offset = v.strip()
        elif k.startswith("transform."):
            transforms[k.split(".", 1)[1]] = v.strip()
        else:
            raise UserError(f"unknown [data] key {k!r}")
    return transforms, offset


def resolved_config(cp, spec, priors, opts, fixed) -> dict:
    transforms, offset = data_options(cp)
    return {"model": spec.to_dict(), "priors": priors.to_dict(), "inference": asdict(opts),
            "fixed": fixed, "data": {"transforms": transforms, "offset": offset}}


# ---------------------------------------------------------------------------
# artifact writers


def _num(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) for x in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.floating, float)):
        o = float(o)
        return o if math.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def write_json(path: Path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"gcstar": VERSION, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_fit_artifacts(res, outdir: Path, meta: dict, data) -> None:
    s = res.summary
    lat = s.latent
    asm = res.asm
    write_csv(outdir / "latent_marginals.csv", ["name", "mean", "sd", "q025", "q50", "q975"],
              [[n, m, sd, *q] for n, m, sd, q in zip(lat.names, lat.mean, lat.sd, lat.quantiles)])
    write_csv(outdir / "hyper_marginals.csv", ["name", "mean", "sd", "q025", "q50", "q975"],
              [[h.name, h.mean, h.sd, *h.quantiles] for h in s.hypers])
    curves = []
    for b in asm.blocks:
        if b.kind == "smooth":
            m, sd, q = res.block_summary(b.name)
            for x, mi, qi in zip(b.info["midpoints"], m, q):
                curves.append([b.info["covariate"], x, mi, qi[0], qi[2]])
    write_csv(outdir / "fitted_curves.csv", ["covariate", "x", "mean", "q025", "q975"], curves)
    field = []
    for b in asm.blocks:
        if b.kind == "spatial":
            m, sd, _ = res.block_summary("spatial")
            if "mesh" in b.info:
                xy = b.info["mesh"].vertices
            else:
                c1, c2 = b.info["centers"]
                xy = np.column_stack([np.repeat(c1, len(c2)), np.tile(c2, len(c1))])
            field = [[i, xy[i, 0], xy[i, 1], m[i], sd[i]] for i in range(b.size)]
            if "mesh" in b.info:
                write_mesh(b.info["mesh"], outdir / "mesh.txt")
    write_csv(outdir / "spatial_field.csv", ["node", "s1", "s2", "mean", "sd"], field)
    obs_rows = np.flatnonzero(asm.observed)
    crit = s.criteria
    if crit:
        write_csv(outdir / "cpo.csv", ["row", "cpo"],
                  [[int(r), c] for r, c in zip(obs_rows, crit["cpo"])])
    preds = []
    if s.predictions is not None:
        p = s.predictions
        preds = [[int(r), m, sd, lo, hi] for r, m, sd, lo, hi in
                 zip(p.rows, p.mean, p.sd, p.q025, p.q975)]
    write_csv(outdir / "predictions.csv", ["row", "mean", "sd", "q025", "q975"], preds)
    summary = {
        **meta,
        "latent": {n: {"mean": m, "sd": sd, "q025": q[0], "q50": q[1], "q975": q[2]}
                   for n, m, sd, q in zip(lat.names, lat.mean, lat.sd, lat.quantiles)},
        "hyperparameters": {h.name: {"mean": h.mean, "sd": h.sd, "q025": h.quantiles[0],
                                     "q50": h.quantiles[1], "q975": h.quantiles[2],
                                     "degenerate": h.degenerate} for h in s.hypers},
        "criteria": ({"dic": crit["dic"], "waic": crit["waic"], "ls": crit["ls"],
                      "cpo_flagged_rows": [int(obs_rows[i]) for i in crit["cpo_flagged"]],
                      "dic_plugin": crit["dic_plugin"]} if crit else {}),
        "diagnostics": s.diagnostics,
        "n_rows": int(data.n), "n_observed": int(asm.observed.sum()),
        "hyper_grid": {"z": res.grid.z, "weights": res.grid.weights, "log_post": res.grid.log_post,
                       "names": res.problem.free_names},
    }
    write_json(outdir / "summary.json", summary)


# ---------------------------------------------------------------------------
# commands


def _prepare(args):
    cp = load_config(args.config)
    spec = spec_from_config(cp)
    priors = priors_from_config(cp)
    opts = options_from_config(cp, getattr(args, "seed", None))
    fixed = fixed_from_config(cp)
    transforms, offset = data_options(cp)
    if not Path(args.data).exists():
        raise UserError(f"dataset not found: {args.data}")
    data = read_dataset_csv(args.data, transforms, offset)
    return cp, spec, priors, opts, fixed, data


def _run_fit(spec, priors, opts, fixed, data, mesh=None):
    asm = build_design(spec, data, fixed_variance=priors.fixed_variance,
                       intercept_variance=priors.intercept_variance, mesh=mesh)
    return fit(asm, spec.likelihood, priors, opts, fixed)


def cmd_fit(args) -> int:
    cp, spec, priors, opts, fixed, data = _prepare(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"command": "fit", "config": resolved_config(cp, spec, priors, opts, fixed),
            "seed": opts.seed, "versions": _versions(),
            "dataset": {"path": str(Path(args.data).resolve()), "sha256": _sha256(args.data)}}
    try:
        res = _run_fit(spec, priors, opts, fixed, data)
    except (ConvergenceError, FactorizationError) as exc:
        write_json(out / "diagnostics.json", {**meta, "error": f"{type(exc).__name__}: {exc}"})
        raise
    write_fit_artifacts(res, out, meta, data)
    _say(args, f"fit complete: {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    fitdir = Path(args.fit)
    sfile = fitdir / "summary.json"
    if not sfile.exists():
        raise UserError(f"not a completed fit directory (no summary.json): {fitdir}")
    summary = json.loads(sfile.read_text())
    conf = summary["config"]
    spec = ModelSpec.from_dict(conf["model"])
    priors = PriorConfig.from_dict(conf["priors"])
    opts = InferenceOptions(**conf["inference"])
    fixed = conf["fixed"]
    transforms, offset = conf["data"]["transforms"], conf["data"]["offset"]
    train_path = summary["dataset"]["path"]
    if not Path(train_path).exists():
        raise UserError(f"training dataset moved or missing: {train_path}")
    if _sha256(train_path) != summary["dataset"]["sha256"]:
        raise UserError(f"training dataset changed since the fit: {train_path}")
    train = read_dataset_csv(train_path, transforms, offset)
    if not Path(args.data).exists():
        raise UserError(f"dataset not found: {args.data}")
    new = read_dataset_csv(args.data, transforms, offset, integer_y=False)
    mesh = read_mesh(fitdir / "mesh.txt") if (fitdir / "mesh.txt").exists() else None
    res = _run_fit(spec, priors, opts, fixed, train, mesh)
    A_new, off_new = design_rows(res.asm, new)
    ss = np.random.SeedSequence([opts.seed, 7])
    draws = posterior_sample(res.grid, res.approxes, res.problem, opts.n_pred_draws,
                             np.random.default_rng(ss.spawn(1)[0]))
    p = predict_counts(res.problem, draws, np.arange(new.n), np.random.default_rng(ss),
                       A_new=A_new, offset_new=off_new)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "predictions.csv", ["row", "mean", "sd", "q025", "q975"],
              [[int(r), m, sd, lo, hi] for r, m, sd, lo, hi in zip(p.rows, p.mean, p.sd, p.q025, p.q975)])
    _say(args, f"wrote {new.n} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def simulation_overrides(cp) -> dict:
    """Scenario fields set in the ``[simulation]`` section (n1, n2, n_reps, n_bins)."""
    out = {}
    for k, v in _section(cp, "simulation").items():
        if k not in ("n1", "n2", "n_reps", "n_bins"):
            raise UserError(f"unknown [simulation] key {k!r}")
        try:
            out[k] = int(v)
        except ValueError:
            raise UserError(f"[simulation] {k}: not an integer: {v!r}") from None
    return out


def cmd_simulate(args) -> int:
    from .simulation import run_study, scenarios_for_profile, write_study

    cp = load_config(args.config)
    opts = options_from_config(cp, args.seed)
    if not cp.has_option("inference", "n_draws"):
        opts = InferenceOptions(**{**asdict(opts), "n_draws": 500})
    alphas = tuple(float(a) for a in _list(args.alphas))
    models = tuple(_list(args.models))
    scen = scenarios_for_profile(args.profile, alphas, seed=args.seed if args.seed is not None else 2024)
    overrides = simulation_overrides(cp)
    if args.reps is not None:
        overrides["n_reps"] = args.reps
    if overrides:
        scen = [replace(s, **overrides) for s in scen]
    report = run_study(scen, models, opts, priors_from_config(cp), workers=args.workers)
    paths = write_study(report, args.out)
    write_json(Path(args.out) / "study_config.json",
               {"profile": args.profile, "alphas": alphas, "models": models,
                "scenarios": [asdict(s) for s in scen], "inference": asdict(opts),
                "failed": report.n_failed, "versions": _versions()})
    _say(args, "wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _parse_range(spec: str) -> np.ndarray:
    if ".." in spec:
        a, b = spec.split("..")
        return np.arange(int(a), int(b) + 1)
    return np.array([int(t) for t in _list(spec)])


def cmd_dist(args) -> int:
    p = gcd.GCParams(args.alpha, args.beta, args.t)
    rows = []
    if args.function in ("pmf", "logpmf"):
        n = _parse_range(args.n)
        vals = gcd.pmf(n, p) if args.function == "pmf" else gcd.log_pmf(n, p)
        header = ["n", args.function]
        rows = [[int(k), float(v)] for k, v in zip(n, np.atleast_1d(vals))]
    elif args.function in ("mean", "variance"):
        v = gcd.mean(p) if args.function == "mean" else gcd.variance(p)
        header = ["alpha", "beta", "t", args.function]
        rows = [[args.alpha, args.beta, args.t, v]]
    elif args.function == "hazard":
        lo, hi, m = (float(x) for x in args.grid.split(":"))
        u = np.linspace(lo, hi, int(m))
        h = gcd.gamma_hazard(u, args.alpha, args.beta)
        header = ["t", "hazard"]
        rows = [[a, b] for a, b in zip(u, np.atleast_1d(h))]
    elif args.function == "sample":
        if args.size < 1:
            raise UserError("--size must be >= 1")
        y = gcd.sample_counts(p.alpha, p.beta * p.t, np.random.default_rng(args.seed), size=args.size)
        header = ["draw", "count"]
        rows = [[i, int(v)] for i, v in enumerate(np.atleast_1d(y))]
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) for x in r])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _say(args, msg):
    if getattr(args, "verbose", 0) >= 0:
        print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcstar", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"gcstar {VERSION}")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("-q", "--quiet", dest="verbose", action="store_const", const=-1, default=0)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predictive counts for new rows from a fit directory")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-q", "--quiet", dest="verbose", action="store_const", const=-1, default=0)
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="run the lattice simulation study")
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--alphas", default="0.4,1.0,1.5")
    s.add_argument("--models", default="gc,poisson,negbin,genpoisson")
    s.add_argument("--workers", type=int)
    s.add_argument("-q", "--quiet", dest="verbose", action="store_const", const=-1, default=0)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("dist", help="gamma-count distribution utilities")
    d.add_argument("function", choices=("pmf", "logpmf", "mean", "variance", "hazard", "sample"))
    d.add_argument("--alpha", type=float, required=True)
    d.add_argument("--beta", type=float, default=1.0,
                   help="waiting-time rate (for hazard: the gamma rate)")
    d.add_argument("--t", type=float, default=1.0, help="observation window length")
    d.add_argument("--n", default="0..10", help="counts: 'a..b' or comma list")
    d.add_argument("--grid", default="0.05:5:100", help="hazard grid lo:hi:points")
    d.add_argument("--size", type=int, default=10, help="number of draws for 'sample'")
    d.add_argument("--seed", type=int, default=1, help="random seed for 'sample'")
    d.add_argument("--out")
    d.set_defaults(func=cmd_dist)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    try:
        return args.func(args)
    except (ConvergenceError, FactorizationError) as exc:
        print(f"gcstar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, GCStarError, ValueError, OSError) as exc:
        print(f"gcstar: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
