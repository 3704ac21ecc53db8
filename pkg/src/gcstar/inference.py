"""Nested Laplace posterior engine.

For each hyperparameter point ``theta`` the latent field is approximated by a
Gaussian at its conditional mode (Newton iterations under linear
constraints).  The hyperparameter posterior is the Laplace ratio at that
mode; it is integrated on a standardized grid (or a central composite
design) and latent marginals are weighted Gaussian mixtures.

Linear algebra is dense: the latent dimensions targeted here (a few hundred
to about a thousand) factorize in milliseconds.  Constraints ``C psi = 0``
are imposed by working with ``H + C'C`` and correcting by conditioning on
the constraint (kriging), which leaves the quadratic form on the constraint
subspace unchanged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import optimize, special

from .errors import ConvergenceError, DomainError, FactorizationError
from .likelihoods import ObsModel
from .model import DesignAssembly
from .priors import PriorConfig, log_prior_lik_hyper, log_prior_log_precision

LOG_2PI = math.log(2 * math.pi)
QUANTILE_PROBS = (0.025, 0.5, 0.975)
DEFAULT_HYPER_START = {"gc": 1.0, "negbin": 5.0, "genpoisson": 0.1, "gaussian": 1.0}


@dataclass(frozen=True)
class InferenceOptions:
    grid_step: float = 0.75
    log_drop: float = 6.0
    mode: str = "grid"  # grid | ccd | empirical_bayes
    newton_tol: float = 1e-6
    newton_max_iter: int = 50
    n_pred_draws: int = 1000
    n_draws: int = 1000
    seed: int = 1
    ccd_f0: float = 1.1
    fd_step: float = 0.05
    max_axis_steps: int = 30
    restarts: int = 3
    hessian_refine: int = 2

    def __post_init__(self):
        if self.mode not in ("grid", "ccd", "empirical_bayes"):
            raise DomainError(f"unknown inference mode {self.mode!r}")
        if not self.grid_step > 0 or not self.log_drop > 0:
            raise DomainError("grid_step and log_drop must be positive")
        if self.n_draws < 2 or self.n_pred_draws < 1:
            raise DomainError("n_draws must be >= 2 and n_pred_draws >= 1")


# ---------------------------------------------------------------------------
# hyperparameter layout


@dataclass(frozen=True)
class HyperComponent:
    name: str
    kind: str  # "lik" | "prec"
    block: str | None = None


@dataclass(frozen=True, eq=False)
class Problem:
    """A compiled model plus its likelihood family, priors and fixed hypers.

    Free hyperparameters form the internal vector ``z`` (log scale, logit for
    the GP ``phi``); ``fixed`` holds natural-scale values held constant.
    """

    asm: DesignAssembly
    kind: str
    priors: PriorConfig = PriorConfig()
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        comps = []
        if self.kind != "poisson":
            comps.append(HyperComponent(ObsModel(self.kind, DEFAULT_HYPER_START[self.kind]).hyper_name,
                                        "lik"))
        for b in self.asm.penalized_blocks:
            comps.append(HyperComponent(f"tau[{b.name}]", "prec", b.name))
        names = {c.name for c in comps}
        unknown = set(self.fixed) - names
        if unknown:
            raise DomainError(f"cannot fix unknown hyperparameters {sorted(unknown)}")
        object.__setattr__(self, "components", tuple(comps))
        object.__setattr__(self, "free", tuple(c for c in comps if c.name not in self.fixed))
        obs = self.asm.observed
        object.__setattr__(self, "A_obs", self.asm.A[obs].toarray())
        object.__setattr__(self, "y_obs", self.asm.y[obs])
        object.__setattr__(self, "off_obs", self.asm.offset[obs])
        C = self.asm.constraints
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "logdet_CCt",
                           float(np.linalg.slogdet(C @ C.T)[1]) if C.shape[0] else 0.0)
        # constant pieces of each block's prior
        gdets = {b.name: b.precision.log_gdet() for b in self.asm.penalized_blocks}
        object.__setattr__(self, "block_log_gdet", gdets)
        object.__setattr__(self, "Q_blocks", {b.name: b.precision.Q.toarray()
                                              for b in self.asm.penalized_blocks})

    @property
    def dim(self) -> int:
        return len(self.free)

    @property
    def latent_dim(self) -> int:
        return self.asm.latent_dim

    @property
    def free_names(self) -> list:
        return [c.name for c in self.free]

    def natural(self, z) -> dict:
        """All hyperparameters (free and fixed) on their natural scale."""
        out = dict(self.fixed)
        for c, zi in zip(self.free, np.atleast_1d(z)):
            out[c.name] = float(ObsModel.from_internal(self.kind, zi)) if c.kind == "lik" \
                else float(np.exp(zi))
        return out

    def internal(self, values: dict) -> np.ndarray:
        z = []
        for c in self.free:
            v = values[c.name]
            z.append(ObsModel.to_internal(self.kind, v) if c.kind == "lik" else math.log(v))
        return np.array(z, dtype=float)

    def start(self) -> np.ndarray:
        vals = {}
        for c in self.free:
            vals[c.name] = DEFAULT_HYPER_START[self.kind] if c.kind == "lik" else 1.0
        return self.internal(vals)

    def obs_model(self, nat: dict) -> ObsModel:
        if self.kind == "poisson":
            return ObsModel("poisson")
        return ObsModel(self.kind, nat[self.components[0].name])

    def prior_precision(self, nat: dict) -> np.ndarray:
        d = self.latent_dim
        Q = np.zeros((d, d))
        for b in self.asm.blocks:
            if b.penalized:
                Q[b.slice, b.slice] = nat[f"tau[{b.name}]"] * self.Q_blocks[b.name]
            elif b.kind == "fixed":
                Q[b.slice, b.slice] = np.eye(b.size) / b.fixed_variance
        return Q

    def log_hyper_prior(self, z) -> float:
        lp = 0.0
        for c, zi in zip(self.free, np.atleast_1d(z)):
            if c.kind == "lik":
                lp += float(log_prior_lik_hyper(self.kind, zi, self.priors))
            else:
                lp += float(log_prior_log_precision(zi, self.priors.precision))
        return lp

    def log_latent_prior(self, psi, nat: dict) -> float:
        """Gaussian log-prior of the latent vector (generalized normalizer per block)."""
        lp = 0.0
        for b in self.asm.blocks:
            x = psi[b.slice]
            if b.penalized:
                tau = nat[f"tau[{b.name}]"]
                r = b.precision.rank
                lp += (0.5 * r * (math.log(tau) - LOG_2PI) + 0.5 * self.block_log_gdet[b.name]
                       - 0.5 * tau * float(x @ self.Q_blocks[b.name] @ x))
            elif b.kind == "fixed":
                v = b.fixed_variance
                lp += float(np.sum(-0.5 * (LOG_2PI + math.log(v)) - 0.5 * x * x / v))
        return lp


def make_problem(asm: DesignAssembly, kind: str, priors: PriorConfig | None = None,
                 fixed: dict | None = None) -> Problem:
    return Problem(asm, kind, priors or PriorConfig(), dict(fixed or {}))


# ---------------------------------------------------------------------------
# joint density and the Gaussian approximation


def log_joint(psi, z, prob: Problem) -> float:
    """``log pi(psi, theta, y)`` with ``theta`` given on the internal scale."""
    psi = np.asarray(psi, dtype=float)
    nat = prob.natural(z)
    obs = prob.obs_model(nat)
    eta = prob.A_obs @ psi + prob.off_obs
    ll = obs.loglik(prob.y_obs, eta)
    total = float(np.sum(ll))
    if not np.isfinite(total):
        return -math.inf
    return total + prob.log_latent_prior(psi, nat) + prob.log_hyper_prior(z)


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    mode: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of H + C'C
    log_det: float  # log |V' H V| on the constraint subspace
    converged: bool
    newton_iters: int
    n_clamped: int
    cov: np.ndarray | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


class _Constrained:
    """Solves with ``M = H + C'C`` and conditions on ``C x = 0``."""

    def __init__(self, M, C):
        try:
            self.cf = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            diag = np.diag(M)
            raise FactorizationError(
                f"negative Hessian not positive definite (smallest diagonal {diag.min():.3g} "
                f"at index {int(diag.argmin())})") from exc
        self.C = C
        if C.shape[0]:
            self.MinvCt = sla.cho_solve(self.cf, C.T, check_finite=False)
            self.S = C @ self.MinvCt
            self.Scf = sla.cho_factor(self.S, lower=True)

    def solve(self, b):
        x = sla.cho_solve(self.cf, b, check_finite=False)
        return self.correct(x)

    def correct(self, x):
        if self.C.shape[0] == 0:
            return x
        return x - self.MinvCt @ sla.cho_solve(self.Scf, self.C @ x)

    def log_det_subspace(self, logdet_CCt):
        ld = 2 * float(np.sum(np.log(np.diag(self.cf[0]))))
        if self.C.shape[0]:
            ld += 2 * float(np.sum(np.log(np.diag(self.Scf[0])))) - logdet_CCt
        return ld

    def covariance(self):
        d = self.cf[0].shape[0]
        Minv = sla.cho_solve(self.cf, np.eye(d), check_finite=False)
        if self.C.shape[0]:
            Minv = Minv - self.MinvCt @ sla.cho_solve(self.Scf, self.MinvCt.T)
        return 0.5 * (Minv + Minv.T)


def _initial_latent(prob: Problem) -> np.ndarray:
    psi = np.zeros(prob.latent_dim)
    if prob.asm.spec.intercept and len(prob.y_obs):
        if prob.kind == "gaussian":
            psi[0] = float(np.mean(prob.y_obs - prob.off_obs))
        else:
            psi[0] = float(np.log(np.mean(prob.y_obs) + 0.5) - np.mean(prob.off_obs))
    return psi


def latent_gaussian_approx(z, prob: Problem, init=None, tol: float = 1e-6, max_iter: int = 50,
                           with_cov: bool = True) -> GaussianApprox:
    """Newton ascent on ``psi`` at fixed ``theta`` with step halving."""
    nat = prob.natural(z)
    obs = prob.obs_model(nat)
    Qp = prob.prior_precision(nat)
    A, y, off, C = prob.A_obs, prob.y_obs, prob.off_obs, prob.C
    CtC = C.T @ C

    def objective(psi):
        eta = A @ psi + off
        ll = obs.loglik(y, eta)
        return float(np.sum(ll)) - 0.5 * float(psi @ Qp @ psi)

    def project(x):
        # orthogonal projection onto the constraint subspace (any feasible start will do)
        return x - C.T @ np.linalg.solve(C @ C.T, C @ x) if C.shape[0] else x

    psi = project(_initial_latent(prob) if init is None else np.array(init, dtype=float))
    f = objective(psi)
    if not np.isfinite(f):
        psi = project(_initial_latent(prob))
        f = objective(psi)
    converged = False
    it = 0
    n_clamped = 0
    for it in range(max_iter + 1):
        eta = A @ psi + off
        dv = obs.derivs(y, eta)
        grad = A.T @ dv.d1 - Qp @ psi
        W = -dv.d2
        raw = obs.derivs(y, eta, clamp=False).d2
        n_clamped = int(np.sum(raw > dv.d2))
        H = (A.T * W) @ A + Qp
        solver = _Constrained(H + CtC, C)
        pg = project(grad)
        if np.max(np.abs(pg), initial=0.0) < tol:
            converged = True
            break
        if it == max_iter:
            break
        step = solver.solve(grad)
        t = 1.0
        for _ in range(40):
            cand = solver.correct(psi + t * step)
            fc = objective(cand)
            if np.isfinite(fc) and fc >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            break
        psi, f = cand, fc
    cov = solver.covariance() if with_cov else None
    return GaussianApprox(psi, solver.cf[0], solver.log_det_subspace(prob.logdet_CCt),
                          converged, it, n_clamped, cov)


def hyper_log_posterior(z, prob: Problem, approx: GaussianApprox | None = None, **newton) -> float:
    """Laplace ratio ``log pi(psi*, theta, y) - log pi_G(psi* | theta, y)``."""
    if approx is None:
        approx = latent_gaussian_approx(z, prob, with_cov=False, **newton)
    if not approx.converged:
        raise ConvergenceError("latent Newton iterations did not converge")
    r = prob.latent_dim - prob.C.shape[0]
    return log_joint(approx.mode, z, prob) + 0.5 * r * LOG_2PI - 0.5 * approx.log_det


# ---------------------------------------------------------------------------
# hyperparameter exploration


@dataclass(frozen=True, eq=False)
class HyperGrid:
    z: np.ndarray  # (P, k) internal-scale points
    log_post: np.ndarray
    weights: np.ndarray
    mode_index: int
    mode_z: np.ndarray
    hessian: np.ndarray  # negative Hessian of log posterior at the mode (k x k)
    design: str
    n_dropped: int = 0
    step: float = 0.75

    @property
    def n_points(self) -> int:
        return len(self.weights)


def _neg_hessian(f, x0, h):
    k = len(x0)
    H = np.zeros((k, k))
    f0 = f(x0)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        H[i, i] = -(f(x0 + ei) - 2 * f0 + f(x0 - ei)) / h ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h
            v = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * h * h)
            H[i, j] = H[j, i] = -v
    return 0.5 * (H + H.T)


def _standardizer(Hneg):
    lam, V = np.linalg.eigh(Hneg)
    if np.any(lam <= 0):
        warnings.warn("hyperparameter Hessian not negative definite at the mode; "
                      "using absolute curvatures", RuntimeWarning, stacklevel=3)
        lam = np.maximum(np.abs(lam), 1e-6)
    return V / np.sqrt(lam)  # z = mode + T u


class _Evaluator:
    """Caches Laplace evaluations keyed on the exact z bytes (deterministic order)."""

    def __init__(self, prob: Problem, opts: InferenceOptions):
        self.prob, self.opts = prob, opts
        self.cache = {}
        self.last_mode = None

    def approx(self, z, with_cov=False):
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        hit = self.cache.get(key)
        if hit is not None and (not with_cov or hit[0].cov is not None):
            return hit
        try:
            ga = latent_gaussian_approx(z, self.prob, init=self.last_mode, tol=self.opts.newton_tol,
                                        max_iter=self.opts.newton_max_iter, with_cov=with_cov)
            lp = hyper_log_posterior(z, self.prob, ga) if ga.converged else -math.inf
        except (FactorizationError, FloatingPointError, ValueError, DomainError):
            ga, lp = None, -math.inf
        if ga is not None and ga.converged:
            self.last_mode = ga.mode
        self.cache[key] = (ga, lp)
        return ga, lp

    def __call__(self, z):
        return self.approx(z)[1]


def _optimize_mode(ev: _Evaluator, z0, opts: InferenceOptions):
    def obj(z):
        v = ev(z)
        return -v if np.isfinite(v) else 1e300

    best = None
    start = np.array(z0, dtype=float)
    for attempt in range(opts.restarts + 1):
        res = optimize.minimize(obj, start, method="Nelder-Mead",
                                options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 400 * len(start),
                                         "initial_simplex": start + np.vstack([np.zeros(len(start)),
                                                                               np.eye(len(start))])})
        if best is None or res.fun < best.fun:
            best = res
        if res.success and np.isfinite(res.fun) and res.fun < 1e299:
            break
        start = best.x + 0.5 * (attempt + 1) * np.ones(len(start)) * (-1) ** attempt
    if best is None or best.fun >= 1e299:
        raise ConvergenceError("hyperparameter mode search failed after restarts")
    # a final polish from the optimum is cheap and tightens the mode
    res = optimize.minimize(obj, best.x, method="Nelder-Mead",
                            options={"xatol": 1e-5, "fatol": 1e-9, "maxiter": 200 * len(start)})
    return res.x if res.fun <= best.fun else best.x


def _grid_points(ev, mode, T, f_mode, opts):
    k = len(mode)
    step, drop = opts.grid_step, opts.log_drop
    ranges = []
    for j in range(k):
        kept = [0]
        for sgn in (1, -1):
            for i in range(1, opts.max_axis_steps + 1):
                u = np.zeros(k)
                u[j] = sgn * i * step
                if f_mode - ev(mode + T @ u) >= drop:
                    break
                kept.append(sgn * i)
        ranges.append(sorted(kept))
    pts = []
    for idx in np.array(np.meshgrid(*ranges, indexing="ij")).reshape(k, -1).T:
        u = idx * step
        pts.append(u)
    return pts, step ** k


def _ccd_points(k, f0):
    pts = [np.zeros(k)]
    for j in range(k):
        for s in (1, -1):
            u = np.zeros(k)
            u[j] = s * math.sqrt(k)
            pts.append(u)
    for signs in np.array(np.meshgrid(*[[-1, 1]] * k, indexing="ij")).reshape(k, -1).T:
        pts.append(signs.astype(float))
    pts = [f0 * p for p in pts]
    n_s = len(pts) - 1
    # non-center design weight chosen so a standard Gaussian gets unit variance per axis
    w_rel = 1.0 / (n_s * (f0 * f0 - 1)) * math.exp(k * f0 * f0 / 2)
    weights = np.array([1.0] + [w_rel] * n_s)
    return pts, weights


def explore_hypers(prob: Problem, opts: InferenceOptions = InferenceOptions(),
                   evaluator: _Evaluator | None = None) -> tuple:
    """Integration design over the free hyperparameters.

    Returns ``(HyperGrid, approxes)`` where ``approxes[i]`` is the Gaussian
    approximation (with covariance) at grid point ``i``.
    """
    ev = evaluator or _Evaluator(prob, opts)
    k = prob.dim
    if k == 0:
        ga, lp = ev.approx(np.zeros(0), with_cov=True)
        if ga is None or not ga.converged:
            raise ConvergenceError("latent Newton iterations did not converge")
        return HyperGrid(np.zeros((1, 0)), np.array([lp]), np.ones(1), 0, np.zeros(0),
                         np.zeros((0, 0)), "fixed"), [ga]
    mode = _optimize_mode(ev, prob.start(), opts)
    f_mode = ev(mode)
    Hneg = _neg_hessian(ev, mode, opts.fd_step)
    T = _standardizer(Hneg)
    # The alpha prior has a cusp at alpha = 1, so a narrow difference stencil
    # can overstate curvature badly.  Re-estimate it in standardized
    # coordinates with a +-1 sd stencil (a secant fit over the posterior width).
    for _ in range(opts.hessian_refine):
        Hu = _neg_hessian(lambda u: ev(mode + T @ u), np.zeros(k), 1.0)
        if not np.all(np.isfinite(Hu)):
            break
        T = T @ _standardizer(Hu)
    Tinv = np.linalg.inv(T)
    Hneg = Tinv.T @ Tinv
    if opts.mode == "empirical_bayes":
        pts, design_w, design = [np.zeros(k)], np.ones(1), "empirical_bayes"
    elif opts.mode == "ccd" or k > 2:
        pts, design_w = _ccd_points(k, opts.ccd_f0)
        design = "ccd"
    else:
        pts, _ = _grid_points(ev, mode, T, f_mode, opts)
        design_w = np.ones(len(pts))
        design = "grid"
    zs, lps, gas, dws = [], [], [], []
    dropped = 0
    for u, w in zip(pts, design_w):
        z = mode + T @ u
        lp = ev(z)
        if design == "grid" and f_mode - lp >= opts.log_drop:
            continue
        ga, lp = ev.approx(z, with_cov=True)
        if ga is None or not ga.converged or not np.isfinite(lp):
            warnings.warn(f"dropping hyperparameter point {np.round(z, 4).tolist()}: "
                          "latent approximation failed", RuntimeWarning, stacklevel=2)
            dropped += 1
            continue
        zs.append(z)
        lps.append(lp)
        gas.append(ga)
        dws.append(w)
    if not zs:
        raise ConvergenceError("no hyperparameter point produced a converged approximation")
    lps = np.array(lps)
    w = np.array(dws) * np.exp(lps - lps.max())
    w = w / w.sum()
    imode = int(np.argmax(lps))
    step = opts.grid_step if design == "grid" else 1.0
    return HyperGrid(np.array(zs), lps, w, imode, np.array(zs[imode]), Hneg, design,
                     dropped, step), gas


# ---------------------------------------------------------------------------
# marginal summaries


def _mixture_quantiles(means, sds, weights, probs):
    """Quantiles of per-row Gaussian mixtures by vectorized bisection.

    ``means`` and ``sds`` have shape ``(n, P)``.
    """
    means = np.atleast_2d(means)
    sds = np.maximum(np.atleast_2d(sds), 1e-300)
    lo = np.min(means - 10 * sds, axis=1)
    hi = np.max(means + 10 * sds, axis=1)
    out = np.empty((means.shape[0], len(probs)))
    for j, p in enumerate(probs):
        a, b = lo.copy(), hi.copy()
        for _ in range(100):
            m = 0.5 * (a + b)
            cdf = special.ndtr((m[:, None] - means) / sds) @ weights
            below = cdf < p
            a = np.where(below, m, a)
            b = np.where(below, b, m)
        out[:, j] = 0.5 * (a + b)
    return out


@dataclass(frozen=True, eq=False)
class LatentSummary:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    quantiles: np.ndarray  # (d, 3) at QUANTILE_PROBS


def latent_marginals(grid: HyperGrid, approxes, names=None) -> LatentSummary:
    w = grid.weights
    M = np.column_stack([ga.mode for ga in approxes])
    S = np.column_stack([ga.sd for ga in approxes])
    mean = M @ w
    var = (S ** 2 + M ** 2) @ w - mean ** 2
    sd = np.sqrt(np.maximum(var, 0.0))
    if len(w) == 1:
        q = mean[:, None] + sd[:, None] * special.ndtri(np.array(QUANTILE_PROBS))[None, :]
    else:
        q = _mixture_quantiles(M, S, w, QUANTILE_PROBS)
    if names is None:
        names = [f"psi[{i}]" for i in range(len(mean))]
    return LatentSummary(list(names), mean, sd, q)


@dataclass(frozen=True, eq=False)
class HyperMarginal:
    name: str
    mean: float
    sd: float
    quantiles: np.ndarray
    internal_grid: np.ndarray
    density: np.ndarray  # density on the internal scale
    degenerate: bool = False


def _to_natural(prob: Problem, comp: HyperComponent, z):
    if comp.kind == "lik":
        return ObsModel.from_internal(prob.kind, z)
    return np.exp(z)


def hyper_marginals(grid: HyperGrid, prob: Problem) -> list:
    """Per-hyperparameter marginals on the natural scale.

    Each grid point carries a Gaussian kernel on the internal axis whose width
    is the grid spacing projected on that axis; the marginal density is the
    weighted kernel mixture.  Precisions also report ``sigma = tau^(-1/2)``.
    """
    out = []
    k = prob.dim
    if k == 0:
        return out
    cov = np.linalg.inv(grid.hessian) if np.all(np.linalg.eigvalsh(grid.hessian) > 0) \
        else np.diag(1.0 / np.maximum(np.abs(np.diag(grid.hessian)), 1e-6))
    w = grid.weights
    degenerate = grid.n_points == 1
    for j, comp in enumerate(prob.free):
        zj = grid.z[:, j]
        sj = math.sqrt(max(cov[j, j], 1e-12))
        # kernel width: half a standardized grid step (the full sd for one point)
        h = np.full(len(w), sj if degenerate else 0.5 * sj * grid.step)
        zz = np.linspace(zj.min() - 5 * h.max() - 3 * sj * degenerate,
                         zj.max() + 5 * h.max() + 3 * sj * degenerate, 201)
        dens = (np.exp(-0.5 * ((zz[:, None] - zj) / h) ** 2) / (h * math.sqrt(2 * math.pi))) @ w
        nat_pts = _to_natural(prob, comp, zj)
        mean = float(nat_pts @ w)
        sd = float(math.sqrt(max((nat_pts ** 2) @ w - mean ** 2, 0.0)))
        zq = _mixture_quantiles(np.atleast_2d(zj), np.atleast_2d(h), w, QUANTILE_PROBS)[0]
        q = _to_natural(prob, comp, zq)
        out.append(HyperMarginal(comp.name, mean, sd, np.asarray(q), zz, dens, degenerate))
        if comp.kind == "prec":
            sig = np.exp(-0.5 * zj)
            ms = float(sig @ w)
            out.append(HyperMarginal(f"sigma[{comp.block}]", ms,
                                     float(math.sqrt(max((sig ** 2) @ w - ms ** 2, 0.0))),
                                     np.exp(-0.5 * zq[::-1]), zz, dens, degenerate))
    if degenerate:
        warnings.warn("single-point hyperparameter grid: marginals are degenerate",
                      RuntimeWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# sampling and prediction


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    point: np.ndarray  # grid index per draw
    z: np.ndarray  # (n, k)
    psi: np.ndarray  # (n, d)


def posterior_sample(grid: HyperGrid, approxes, prob: Problem, n_draws: int,
                     rng: np.random.Generator) -> PosteriorDraws:
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    idx = rng.choice(grid.n_points, size=n_draws, p=grid.weights)
    d = prob.latent_dim
    psi = np.empty((n_draws, d))
    C = prob.C
    for p in range(grid.n_points):
        sel = np.flatnonzero(idx == p)
        if not len(sel):
            continue
        ga = approxes[p]
        eps = rng.standard_normal((d, len(sel)))
        x = sla.solve_triangular(ga.chol, eps, lower=True, trans="T")
        if C.shape[0]:
            solver_cf = (ga.chol, True)
            MinvCt = sla.cho_solve(solver_cf, C.T)
            x = x - MinvCt @ np.linalg.solve(C @ MinvCt, C @ x)
        psi[sel] = ga.mode + x.T
    return PosteriorDraws(idx, grid.z[idx], psi)


def draw_hypers(prob: Problem, draws: PosteriorDraws) -> list:
    """Natural-scale hyperparameter dict per draw."""
    return [prob.natural(z) for z in draws.z]


def pointwise_loglik(prob: Problem, draws: PosteriorDraws) -> np.ndarray:
    """``(n_draws, n_observed)`` matrix of ``log p(y_i | draw)``."""
    out = np.empty((len(draws.point), len(prob.y_obs)))
    eta = draws.psi @ prob.A_obs.T + prob.off_obs
    for p in np.unique(draws.point):
        sel = draws.point == p
        obs = prob.obs_model(prob.natural(draws.z[np.flatnonzero(sel)[0]]))
        out[sel] = obs.loglik(prob.y_obs[None, :], eta[sel])
    return out


@dataclass(frozen=True, eq=False)
class Predictions:
    rows: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray


def predict_counts(prob: Problem, draws: PosteriorDraws, rows, rng: np.random.Generator,
                   A_new=None, offset_new=None) -> Predictions:
    """Posterior predictive count summaries.

    ``rows`` index assembly rows (prediction-only rows of the fit); pass
    ``A_new``/``offset_new`` instead to predict rows outside the assembly, in
    which case an iid term contributes fresh ``N(0, 1/tau)`` noise.
    """
    rows = np.asarray(rows, dtype=int)
    if A_new is None:
        A = prob.asm.A[rows].toarray()
        off = prob.asm.offset[rows]
        fresh_iid = False
    else:
        A = A_new.toarray() if hasattr(A_new, "toarray") else np.asarray(A_new)
        off = np.asarray(offset_new, dtype=float)
        fresh_iid = any(b.kind == "iid" for b in prob.asm.blocks)
    eta = draws.psi @ A.T + off
    if fresh_iid:
        tau = np.array([prob.natural(z)["tau[iid]"] for z in draws.z])
        eta = eta + rng.standard_normal(eta.shape) / np.sqrt(tau)[:, None]
    ysim = np.empty_like(eta)
    for p in np.unique(draws.point):
        sel = np.flatnonzero(draws.point == p)
        obs = prob.obs_model(prob.natural(draws.z[sel[0]]))
        ysim[sel] = obs.sample(eta[sel], rng)
    method = "linear" if prob.kind == "gaussian" else "inverted_cdf"
    q = np.quantile(ysim, [0.025, 0.975], axis=0, method=method)
    return Predictions(rows, ysim.mean(axis=0), ysim.std(axis=0, ddof=1) if len(ysim) > 1
                       else np.zeros(len(rows)), q[0], q[1])


# ---------------------------------------------------------------------------
# MCMC reference sampler (validation oracle)


@dataclass(frozen=True, eq=False)
class McmcResult:
    z: np.ndarray  # (n_keep, k)
    psi: np.ndarray  # (n_keep, d)
    accept_hyper: np.ndarray
    accept_latent: float
    names: list


def mcmc_reference(prob: Problem, iters: int, rng: np.random.Generator, burn_frac: float = 0.2,
                   thin: int = 1, init_z=None) -> McmcResult:
    """Metropolis-within-Gibbs on ``(theta, psi)``.

    Each sweep updates every free hyperparameter by a scalar random walk on
    the internal scale, then the whole latent vector by a blocked random walk
    shaped by the Laplace covariance at the hyperparameter mode (kept on the
    constraint subspace).  Step sizes adapt during burn-in only.
    """
    d = prob.latent_dim
    if d > 200:
        raise DomainError(f"mcmc_reference supports latent_dim <= 200, got {d}")
    k = prob.dim
    z = prob.start() if init_z is None else np.array(init_z, dtype=float)
    if k:
        ev = _Evaluator(prob, InferenceOptions())
        z = _optimize_mode(ev, z, InferenceOptions())
    ga = latent_gaussian_approx(z, prob)
    psi = ga.mode.copy()
    L = np.linalg.cholesky(ga.cov + 1e-12 * np.eye(d)) if d else np.zeros((0, 0))
    C = prob.C
    if C.shape[0]:
        P = np.eye(d) - C.T @ np.linalg.solve(C @ C.T, C)
        L = P @ L
    scale_lat = 2.38 / math.sqrt(max(d - C.shape[0], 1))
    scale_hyp = np.full(k, 0.5)

    # the joint splits into likelihood, latent prior and hyperprior pieces;
    # each move recomputes only the pieces it touches
    def lik(psi_, nat_):
        v = float(np.sum(prob.obs_model(nat_).loglik(prob.y_obs, prob.A_obs @ psi_ + prob.off_obs)))
        return v if np.isfinite(v) else -math.inf

    nat = prob.natural(z)
    parts = [lik(psi, nat), prob.log_latent_prior(psi, nat), prob.log_hyper_prior(z)]
    n_burn = int(burn_frac * iters)
    keep_z, keep_psi = [], []
    acc_h = np.zeros(k)
    acc_l = 0
    win_h = np.zeros(k)
    win_l = 0
    for it in range(iters):
        for j in range(k):
            zp = z.copy()
            zp[j] += scale_hyp[j] * rng.standard_normal()
            natp = prob.natural(zp)
            if prob.free[j].kind == "lik":
                new = [lik(psi, natp), parts[1], prob.log_hyper_prior(zp)]
            else:
                new = [parts[0], prob.log_latent_prior(psi, natp), prob.log_hyper_prior(zp)]
            if math.log(rng.random()) < sum(new) - sum(parts):
                z, nat, parts = zp, natp, new
                win_h[j] += 1
                if it >= n_burn:
                    acc_h[j] += 1
        pp = psi + scale_lat * (L @ rng.standard_normal(d))
        new = [lik(pp, nat), prob.log_latent_prior(pp, nat), parts[2]]
        if math.log(rng.random()) < sum(new) - sum(parts):
            psi, parts = pp, new
            win_l += 1
            if it >= n_burn:
                acc_l += 1
        if it < n_burn and (it + 1) % 100 == 0:
            scale_hyp *= np.exp(np.clip(win_h / 100 - 0.44, -0.5, 0.5))
            scale_lat *= math.exp(float(np.clip(win_l / 100 - 0.234, -0.5, 0.5)))
            win_h[:] = 0
            win_l = 0
        if it >= n_burn and (it - n_burn) % thin == 0:
            keep_z.append(z.copy())
            keep_psi.append(psi.copy())
    n_keep = max(iters - n_burn, 1)
    return McmcResult(np.array(keep_z).reshape(len(keep_psi), k), np.array(keep_psi), acc_h / n_keep,
                      acc_l / n_keep, prob.free_names)


def split_rhat(x) -> float:
    """Split-chain potential scale reduction for a single chain."""
    x = np.asarray(x, dtype=float)
    n = len(x) // 2
    chains = np.stack([x[:n], x[n:2 * n]])
    W = chains.var(axis=1, ddof=1).mean()
    B = n * chains.mean(axis=1).var(ddof=1)
    var = (n - 1) / n * W + B / n
    return float(math.sqrt(var / W)) if W > 0 else 1.0


def batch_means_se(x, n_batches: int = 50) -> float:
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    b = x[:m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(b.std(ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------------------
# end-to-end fit


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    latent: LatentSummary
    hypers: list
    criteria: dict
    diagnostics: dict
    predictions: Predictions | None = None


@dataclass(frozen=True, eq=False)
class FitResult:
    problem: Problem
    options: InferenceOptions
    grid: HyperGrid
    approxes: list
    draws: PosteriorDraws
    summary: PosteriorSummary

    @property
    def asm(self) -> DesignAssembly:
        return self.problem.asm

    def hyper(self, name: str) -> HyperMarginal:
        for h in self.summary.hypers:
            if h.name == name:
                return h
        raise KeyError(name)

    def block_summary(self, name: str):
        """Latent mean, sd and quantiles restricted to one block."""
        sl = self.asm.block(name).slice
        lat = self.summary.latent
        return lat.mean[sl], lat.sd[sl], lat.quantiles[sl]


def compute_criteria(prob: Problem, grid: HyperGrid, latent: LatentSummary,
                     draws: PosteriorDraws) -> dict:
    """DIC, WAIC and log-score from posterior draws.

    The DIC plug-in is the posterior mean latent field with ``theta`` at the
    modal grid point.
    """
    from .criteria import cpo_ls, dic, waic

    if len(prob.y_obs) == 0:
        return {}
    pll = pointwise_loglik(prob, draws)
    obs = prob.obs_model(prob.natural(grid.mode_z))
    ll_mean = float(np.sum(obs.loglik(prob.y_obs, prob.A_obs @ latent.mean + prob.off_obs)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w = waic(pll)
    c = cpo_ls(pll)
    return {"dic": dic(pll, ll_mean), "waic": w, "ls": c["ls"], "cpo": c["cpo"],
            "cpo_flagged": c["flagged"].tolist(), "waic_warnings": len(caught),
            "dic_plugin": "posterior mean latent field, modal hyperparameters"}


def fit(asm: DesignAssembly, kind: str, priors: PriorConfig | None = None,
        options: InferenceOptions = InferenceOptions(), fixed: dict | None = None,
        criteria: bool = True) -> FitResult:
    prob = make_problem(asm, kind, priors, fixed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid, approxes = explore_hypers(prob, options)
        hypers = hyper_marginals(grid, prob)
    latent = latent_marginals(grid, approxes, asm.latent_names())
    ss = np.random.SeedSequence(options.seed)
    draw_seed, pred_seed = ss.spawn(2)
    draws = posterior_sample(grid, approxes, prob, options.n_draws, np.random.default_rng(draw_seed))
    crit = compute_criteria(prob, grid, latent, draws) if criteria else {}
    missing = np.flatnonzero(~asm.observed)
    preds = None
    if len(missing):
        pdraws = draws
        if options.n_pred_draws != options.n_draws:
            pdraws = posterior_sample(grid, approxes, prob, options.n_pred_draws,
                                      np.random.default_rng(pred_seed.spawn(1)[0]))
        preds = predict_counts(prob, pdraws, missing, np.random.default_rng(pred_seed))
    diag = {
        "grid_points": grid.n_points,
        "grid_design": grid.design,
        "dropped_points": grid.n_dropped,
        "newton_iters_max": int(max(ga.newton_iters for ga in approxes)),
        "clamped_curvatures_max": int(max(ga.n_clamped for ga in approxes)),
        "hyper_mode": prob.natural(grid.mode_z),
        "warnings": [str(w.message) for w in caught],
    }
    summary = PosteriorSummary(latent, hypers, crit, diag, preds)
    return FitResult(prob, options, grid, approxes, draws, summary)
