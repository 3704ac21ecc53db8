"""Declarative model description and its compilation to a latent layout.

The latent vector is ordered ``[intercept | linear | smooths | spatial | iid]``.
``eta = A @ psi + offset`` where ``A`` maps latent elements to rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps

from .errors import ModelSpecError
from .gmrf import PrecisionModel, iid_precision, rw1_precision, rw2_precision, rw2d_precision, scale_to_unit_gv
from .likelihoods import KINDS
from .mesh import TriMesh, assemble_fem, build_mesh, projector, tps_precision
from .priors import FIXED_EFFECT_VARIANCE

DEFAULT_BINS = 25


@dataclass(eq=False)
class Dataset:
    """Responses (``nan`` marks a missing count), offset, covariates, coordinates."""

    y: np.ndarray
    offset_log: np.ndarray | None = None
    covariates: dict = field(default_factory=dict)
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = len(self.y)
        if self.offset_log is None:
            self.offset_log = np.zeros(n)
        self.offset_log = np.asarray(self.offset_log, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float).reshape(n, 2)
        if len(self.offset_log) != n or any(len(v) != n for v in self.covariates.values()):
            raise ModelSpecError("dataset columns have unequal lengths")
        if not np.all(np.isfinite(self.offset_log)):
            raise ModelSpecError("offsets must be finite")
        obs = self.y[self.observed]
        if np.any(obs < 0):
            raise ModelSpecError("observed responses must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.y)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.offset_log[rows],
                       {k: v[rows] for k, v in self.covariates.items()},
                       None if self.coords is None else self.coords[rows])

    def append(self, other: "Dataset") -> "Dataset":
        if set(self.covariates) != set(other.covariates):
            raise ModelSpecError("cannot append datasets with different covariates")
        coords = None
        if self.coords is not None:
            coords = np.vstack([self.coords, other.coords])
        return Dataset(np.concatenate([self.y, other.y]),
                       np.concatenate([self.offset_log, other.offset_log]),
                       {k: np.concatenate([v, other.covariates[k]]) for k, v in self.covariates.items()},
                       coords)


def read_dataset_csv(path, transforms: dict | None = None, offset: str | None = None,
                     integer_y: bool = True) -> Dataset:
    """Load the CSV schema: ``y`` (empty = missing), optional ``offset_log``, ``s1``, ``s2``.

    ``transforms`` maps column names to ``"log"``; ``offset`` names a column to
    use as the additive log offset (after its transform).
    """
    transforms = dict(transforms or {})
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ModelSpecError(f"{path}: empty file") from None
        if "y" not in header:
            raise ModelSpecError(f"{path}:1: required column 'y' missing")
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ModelSpecError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    if h != "y":
                        raise ModelSpecError(f"{path}:{lineno}: empty value in column {h!r}")
                    cols[h].append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ModelSpecError(f"{path}:{lineno}: column {h!r}: not a number: {cell!r}") from None
                if h == "y" and integer_y and (v < 0 or v != math.floor(v)):
                    raise ModelSpecError(f"{path}:{lineno}: y must be a nonnegative integer, got {cell!r}")
                cols[h].append(v)
    data = {h: np.array(v, dtype=float) for h, v in cols.items()}
    for name, how in transforms.items():
        if name not in data:
            raise ModelSpecError(f"transform refers to unknown column {name!r}")
        if how != "log":
            raise ModelSpecError(f"unsupported transform {how!r} for column {name!r}")
        if np.any(data[name] <= 0):
            raise ModelSpecError(f"column {name!r} must be positive for a log transform")
        data[name] = np.log(data[name])
    off = data.pop("offset_log", None)
    if offset is not None:
        if offset not in data:
            raise ModelSpecError(f"offset column {offset!r} not found")
        extra = data.pop(offset)
        off = extra if off is None else off + extra
    coords = None
    if "s1" in data or "s2" in data:
        if not ("s1" in data and "s2" in data):
            raise ModelSpecError("both s1 and s2 are required for coordinates")
        coords = np.column_stack([data.pop("s1"), data.pop("s2")])
    y = data.pop("y")
    return Dataset(y, off, data, coords)


# ---------------------------------------------------------------------------
# model description


@dataclass(frozen=True)
class SmoothTerm:
    covariate: str
    prior_kind: str = "rw2"
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.prior_kind not in ("rw1", "rw2"):
            raise ModelSpecError(f"smooth prior must be rw1 or rw2, got {self.prior_kind!r}")
        if self.n_bins < 3:
            raise ModelSpecError("smooth terms need at least 3 bins")


@dataclass(frozen=True)
class SpatialTerm:
    """``kind="rw2d"`` on an ``n1 x n2`` lattice, or ``kind="tps"`` on a mesh."""

    kind: str
    n1: int = 0
    n2: int = 0
    variant: str = "paper"
    max_edge: float | None = None
    hull_extension: float | None = None

    def __post_init__(self):
        if self.kind not in ("rw2d", "tps"):
            raise ModelSpecError(f"spatial kind must be rw2d or tps, got {self.kind!r}")
        if self.kind == "rw2d" and (self.n1 < 3 or self.n2 < 3):
            raise ModelSpecError("rw2d needs n1, n2 >= 3")


@dataclass(frozen=True)
class ModelSpec:
    likelihood: str = "gc"
    intercept: bool = True
    linear_terms: tuple = ()
    smooth_terms: tuple = ()
    spatial: SpatialTerm | None = None
    iid_term: bool = False
    scale_model: bool = True

    def __post_init__(self):
        if self.likelihood not in KINDS:
            raise ModelSpecError(f"unknown likelihood {self.likelihood!r}")
        object.__setattr__(self, "linear_terms", tuple(self.linear_terms))
        object.__setattr__(self, "smooth_terms", tuple(self.smooth_terms))
        smooth_names = [s.covariate for s in self.smooth_terms]
        both = set(self.linear_terms) & set(smooth_names)
        if both:
            raise ModelSpecError(f"covariates both linear and smooth: {sorted(both)}")
        if len(set(smooth_names)) != len(smooth_names):
            raise ModelSpecError("duplicate smooth terms")

    def to_dict(self) -> dict:
        d = {
            "likelihood": self.likelihood,
            "intercept": self.intercept,
            "linear": list(self.linear_terms),
            "smooth": [f"{s.covariate}:{s.prior_kind}:{s.n_bins}" for s in self.smooth_terms],
            "iid": self.iid_term,
            "scale_model": self.scale_model,
            "spatial": None,
        }
        if self.spatial is not None:
            sp_ = self.spatial
            d["spatial"] = {"kind": sp_.kind, "n1": sp_.n1, "n2": sp_.n2, "variant": sp_.variant,
                            "max_edge": sp_.max_edge, "hull_extension": sp_.hull_extension}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        smooth = []
        for item in d.get("smooth", []):
            parts = item.split(":")
            cov = parts[0]
            kind = parts[1] if len(parts) > 1 else "rw2"
            bins = int(parts[2]) if len(parts) > 2 else DEFAULT_BINS
            smooth.append(SmoothTerm(cov, kind, bins))
        spatial = d.get("spatial")
        if spatial is not None:
            spatial = SpatialTerm(**spatial)
        return cls(likelihood=d.get("likelihood", "gc"), intercept=bool(d.get("intercept", True)),
                   linear_terms=tuple(d.get("linear", ())), smooth_terms=tuple(smooth),
                   spatial=spatial, iid_term=bool(d.get("iid", False)),
                   scale_model=bool(d.get("scale_model", True)))


# ---------------------------------------------------------------------------
# compilation


def bin_covariate(values, n_bins: int):
    """Equal-width bins on ``[min, max]``, right-closed, minimum in the first bin.

    Returns 0-based bin index per row and the bin midpoints.
    """
    values = np.asarray(values, dtype=float)
    if n_bins < 3:
        raise ModelSpecError("n_bins must be >= 3")
    if not np.all(np.isfinite(values)):
        raise ModelSpecError("covariate values must be finite")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        raise ModelSpecError("cannot bin a constant covariate")
    width = (hi - lo) / n_bins
    idx = np.ceil((values - lo) / width).astype(int) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    mids = lo + width * (np.arange(n_bins) + 0.5)
    return idx, mids


def lattice_index(coords, n1: int, n2: int):
    """Cell index (row-major, ``i * n2 + j``) of each site on an ``n1 x n2`` lattice.

    Coordinates are binned to equal-width cells along each axis; a regular
    grid with ``n1`` by ``n2`` distinct values maps one site per cell.
    """
    coords = np.asarray(coords, dtype=float)
    out = []
    centers = []
    for axis, m in ((0, n1), (1, n2)):
        v = coords[:, axis]
        lo, hi = v.min(), v.max()
        if hi == lo:
            raise ModelSpecError("coordinates do not span a 2-D lattice")
        u = np.unique(v)
        if len(u) == m:
            # already gridded: index by rank of the distinct values
            out.append(np.searchsorted(u, v))
            centers.append(u)
        elif len(u) < m and len(u) > 1 and np.allclose(np.diff(u), np.diff(u)[0]):
            raise ModelSpecError(
                f"lattice mismatch: axis {axis} has {len(u)} distinct values but {m} cells requested")
        else:
            width = (hi - lo) / m
            idx = np.clip(np.floor((v - lo) / width).astype(int), 0, m - 1)
            out.append(idx)
            centers.append(lo + width * (np.arange(m) + 0.5))
    return out[0] * n2 + out[1], centers


@dataclass(frozen=True, eq=False)
class Block:
    name: str
    kind: str  # "fixed" | "smooth" | "spatial" | "iid"
    start: int
    stop: int
    precision: PrecisionModel | None = None
    fixed_variance: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def penalized(self) -> bool:
        return self.precision is not None


@dataclass(frozen=True, eq=False)
class DesignAssembly:
    spec: ModelSpec
    blocks: tuple
    A: sps.csr_matrix
    constraints: np.ndarray
    offset: np.ndarray
    observed: np.ndarray
    y: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    @property
    def layout(self) -> dict:
        return {b.name: (b.start, b.stop) for b in self.blocks}

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def penalized_blocks(self) -> tuple:
        return tuple(b for b in self.blocks if b.penalized)

    def latent_names(self) -> list:
        names = []
        for b in self.blocks:
            if b.size == 1 and b.kind == "fixed":
                names.append(b.name)
            else:
                names.extend(f"{b.name}[{i}]" for i in range(b.size))
        return names


def build_design(spec: ModelSpec, data: Dataset, fixed_variance: float = FIXED_EFFECT_VARIANCE,
                 intercept_variance: float = FIXED_EFFECT_VARIANCE, mesh: TriMesh | None = None
                 ) -> DesignAssembly:
    n = data.n
    blocks = []
    cols = []  # sparse column blocks (n x size)
    constraints = []
    pos = 0

    def add(block, mat):
        nonlocal pos
        blocks.append(block)
        cols.append(sps.csr_matrix(mat))
        pos = block.stop

    if spec.intercept:
        add(Block("intercept", "fixed", pos, pos + 1, fixed_variance=intercept_variance),
            np.ones((n, 1)))
    for name in spec.linear_terms:
        if name not in data.covariates:
            raise ModelSpecError(f"unknown covariate {name!r}")
        add(Block(name, "fixed", pos, pos + 1, fixed_variance=fixed_variance),
            data.covariates[name][:, None])
    for term in spec.smooth_terms:
        if term.covariate not in data.covariates:
            raise ModelSpecError(f"unknown covariate {term.covariate!r}")
        values = data.covariates[term.covariate]
        n_bins = min(term.n_bins, len(np.unique(values)))
        idx, mids = bin_covariate(values, n_bins)
        pm = rw1_precision(n_bins) if term.prior_kind == "rw1" else rw2_precision(n_bins)
        if spec.scale_model:
            pm = scale_to_unit_gv(pm)
        b = Block(f"f({term.covariate})", "smooth", pos, pos + n_bins, precision=pm,
                  info={"covariate": term.covariate, "midpoints": mids, "group": idx,
                        "prior": term.prior_kind})
        add(b, sps.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, n_bins)))
        constraints.append((b, pm.constraint))
    if spec.spatial is not None:
        sp_ = spec.spatial
        if data.coords is None:
            raise ModelSpecError("spatial term requires coordinates s1, s2")
        if sp_.kind == "rw2d":
            cell, centers = lattice_index(data.coords, sp_.n1, sp_.n2)
            pm = rw2d_precision(sp_.n1, sp_.n2, sp_.variant)
            m = sp_.n1 * sp_.n2
            Amat = sps.csr_matrix((np.ones(n), (np.arange(n), cell)), shape=(n, m))
            info = {"cell": cell, "centers": centers, "n1": sp_.n1, "n2": sp_.n2}
        else:
            if mesh is None:
                mesh = build_mesh(data.coords, max_edge=sp_.max_edge, hull_extension=sp_.hull_extension)
            pm = tps_precision(assemble_fem(mesh))
            m = mesh.n_vertices
            Amat = projector(mesh, data.coords)
            info = {"mesh": mesh}
        if spec.scale_model:
            pm = scale_to_unit_gv(pm)
        b = Block("spatial", "spatial", pos, pos + m, precision=pm, info=info)
        add(b, Amat)
        constraints.append((b, pm.constraint))
    if spec.iid_term:
        pm = iid_precision(n)
        add(Block("iid", "iid", pos, pos + n, precision=pm), sps.identity(n, format="csr"))
    if not blocks:
        raise ModelSpecError("model has no latent terms")

    A = sps.hstack(cols, format="csr")
    rows = []
    for b, c in constraints:
        full = np.zeros((c.shape[0], pos))
        full[:, b.slice] = c
        rows.append(full)
    C = np.vstack(rows) if rows else np.zeros((0, pos))
    return DesignAssembly(spec, tuple(blocks), A, C, data.offset_log.copy(), data.observed.copy(),
                          data.y.copy())


def linear_predictor(asm: DesignAssembly, psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.shape[-1] != asm.latent_dim:
        raise ModelSpecError(f"latent vector has length {psi.shape[-1]}, expected {asm.latent_dim}")
    if psi.ndim == 1:
        return asm.A @ psi + asm.offset
    return (asm.A @ psi.T).T + asm.offset


def design_rows(asm: DesignAssembly, data: Dataset):
    """Incidence rows and offsets for new data using the training layout.

    Smooth covariates are binned with the training bin edges (values beyond
    the training range fall in the end bins), lattice sites snap to the
    nearest training cell center per axis, and mesh sites are projected onto
    the training mesh.  Returns ``(A_new, offset_new)``; iid effects of new
    rows are not part of the latent vector.
    """
    n = data.n
    cols = []
    for b in asm.blocks:
        if b.kind == "fixed":
            if b.name == "intercept":
                cols.append(sps.csr_matrix(np.ones((n, 1))))
            else:
                if b.name not in data.covariates:
                    raise ModelSpecError(f"new rows lack covariate {b.name!r}")
                cols.append(sps.csr_matrix(data.covariates[b.name][:, None]))
        elif b.kind == "smooth":
            cov = b.info["covariate"]
            if cov not in data.covariates:
                raise ModelSpecError(f"new rows lack covariate {cov!r}")
            mids = b.info["midpoints"]
            width = mids[1] - mids[0]
            lo = mids[0] - width / 2
            idx = np.clip(np.ceil((data.covariates[cov] - lo) / width).astype(int) - 1, 0, b.size - 1)
            cols.append(sps.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, b.size)))
        elif b.kind == "spatial":
            if data.coords is None:
                raise ModelSpecError("new rows need coordinates s1, s2")
            if "mesh" in b.info:
                cols.append(projector(b.info["mesh"], data.coords))
            else:
                c1, c2 = b.info["centers"]
                i = np.abs(data.coords[:, 0][:, None] - c1[None, :]).argmin(axis=1)
                j = np.abs(data.coords[:, 1][:, None] - c2[None, :]).argmin(axis=1)
                cell = i * b.info["n2"] + j
                cols.append(sps.csr_matrix((np.ones(n), (np.arange(n), cell)), shape=(n, b.size)))
        elif b.kind == "iid":
            cols.append(sps.csr_matrix((n, b.size)))
    return sps.hstack(cols, format="csr"), data.offset_log.copy()
