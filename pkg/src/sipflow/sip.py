"""Seven-point stencil systems and Stone's strongly implicit procedure (SIP).

A :class:`StencilSystem` holds per-cell coefficients with the convention::

    ap * phi_P - sum(a_nb * phi_nb) = su

The factorisation is computed once by :func:`sip_factor` and reused by
:func:`solve` for as long as the coefficients do not change. Symmetric
systems take a residual path that only reads the east, north and top
coefficients. In single-relaxation mode the factors, coefficient copies,
residual and correction are held in float32 while the solution itself keeps
accumulating in float64.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .mesh import Field, GridSpec

NAMES = ("ap", "ae", "aw", "an", "as_", "at", "ab")
_tokens = itertools.count(1)


class SipError(RuntimeError):
    pass


class SingularFactorization(SipError):
    def __init__(self, cell):
        super().__init__(f"vanishing pivot in SIP factorisation at interior cell {cell}")
        self.cell = cell


class StaleFactorization(SipError):
    pass


class NotSymmetric(SipError):
    pass


class StencilSystem:
    """Coefficients and source of ``A phi = su`` on one block.

    Arrays are padded with one ghost layer. For a symmetric system the ghost
    layers of ``ae``, ``an`` and ``at`` on the low sides carry the couplings
    of the neighbouring ghost cells, i.e. ``ae[0] == aw[1]``.

    Changing coefficients after factorisation requires :meth:`touch`, which
    bumps ``revision`` and invalidates existing factors.
    """

    def __init__(self, shape, symmetric=False, block=0):
        self.shape = tuple(int(n) for n in shape)
        padded = tuple(n + 2 for n in self.shape)
        for name in NAMES:
            setattr(self, name, np.zeros(padded))
        self.su = np.zeros(padded)
        self.symmetric = symmetric
        self.block = block
        self.pinned = []
        self.token = next(_tokens)
        self.revision = 0
        self.factorizations = 0

    @property
    def ncells(self):
        return int(np.prod(self.shape))

    def coefficients(self):
        return tuple(getattr(self, name) for name in NAMES)

    def touch(self):
        self.revision += 1

    def set_source(self, values):
        """Set the interior source; pinned rows keep a zero source."""
        self.su[1:-1, 1:-1, 1:-1] = values
        for idx in self.pinned:
            self.su[idx] = 0.0

    def is_symmetric(self):
        """Check ``ae(i) == aw(i+1)`` (and the j, k analogues) inside the block."""
        nx, ny, nz = self.shape
        inner = (slice(1, ny + 1), slice(1, nz + 1))
        ok = np.array_equal(self.ae[0:nx, inner[0], inner[1]], self.aw[1:nx + 1, inner[0], inner[1]])
        ok &= np.array_equal(self.an[1:nx + 1, 0:ny, 1:nz + 1], self.as_[1:nx + 1, 1:ny + 1, 1:nz + 1])
        ok &= np.array_equal(self.at[1:nx + 1, 1:ny + 1, 0:nz], self.ab[1:nx + 1, 1:ny + 1, 1:nz + 1])
        return bool(ok)

    def mirror_ghost_couplings(self):
        """Fill the low-side ghost layers of ae/an/at from aw/as/ab."""
        self.ae[0, 1:-1, 1:-1] = self.aw[1, 1:-1, 1:-1]
        self.an[1:-1, 0, 1:-1] = self.as_[1:-1, 1, 1:-1]
        self.at[1:-1, 1:-1, 0] = self.ab[1:-1, 1:-1, 1]


@dataclass
class SipConfig:
    alpha: float = 0.92
    max_iters: int = 200
    reduction: float = 1e-6
    precision: str = "double"
    norm_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.precision not in ("double", "single"):
            raise ValueError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if self.norm_every < 1:
            raise ValueError("norm_every must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class SipFactors:
    lb: np.ndarray
    lw: np.ndarray
    ls: np.ndarray
    lp: np.ndarray
    un: np.ndarray
    ue: np.ndarray
    ut: np.ndarray
    precision: str
    stamp: tuple
    alpha: float
    coefs: dict = field(repr=False, default_factory=dict)
    lbp: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.lbp is None:
            self.lbp = (self.lb * self.lp).astype(self.lp.dtype)

    @property
    def dtype(self):
        return self.lp.dtype

    def lower(self):
        """Arguments of the forward recurrence (``lb`` premultiplied by ``lp``)."""
        return self.lbp, self.lw, self.ls, self.lp

    def upper(self):
        return self.un, self.ue, self.ut

    def valid_for(self, system):
        return self.stamp == (system.token, system.revision)


@dataclass
class SolveReport:
    iterations: int = 0
    initial_norm: float = 0.0
    final_norm: float = 0.0
    history: list = field(default_factory=list)
    t_factor: float = 0.0
    t_relax: float = 0.0
    factorized: bool = False
    precision: str = "double"

    @property
    def reduction(self):
        return self.final_norm / self.initial_norm if self.initial_norm > 0 else 0.0

    def csv_rows(self):
        return [(i + 1, n) for i, n in enumerate(self.history)]

    def to_csv(self):
        lines = ["iteration,norm"]
        lines += [f"{i},{n:.12g}" for i, n in self.csv_rows()]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble_poisson(block=None, grid: GridSpec | None = None, dt=1.0, pin=(0, 0, 0)):
    """Seven-point Laplacian for the pressure-correction equation on one block.

    Couplings are face area over centre distance. Wall and symmetry faces get
    a zero coupling (homogeneous Neumann); block-boundary and periodic faces
    couple to the ghost layer. Without Dirichlet boundaries the operator is
    singular, so the cell with global index ``pin`` becomes an identity row
    and every coupling to it is removed from both sides, which keeps the
    system symmetric. Pass ``pin=None`` to leave the system singular.

    ``dt`` does not enter the coefficients; it is kept on the system so the
    caller can scale the mass-defect source consistently.
    """
    if grid is None:
        raise ValueError("assemble_poisson needs the grid")
    if not dt > 0:
        raise ValueError("dt must be positive")
    lo = block.lo if block is not None else (0, 0, 0)
    shape = block.shape if block is not None else grid.shape
    bid = block.id if block is not None else 0
    hx, hy, hz = grid.spacing
    if min(hx, hy, hz) <= 0:
        raise ValueError("cell sizes must be positive")
    area_over_h = (hy * hz / hx, hx * hz / hy, hx * hy / hz)

    sys_ = StencilSystem(shape, symmetric=True, block=bid)
    sys_.dt = dt
    gidx = np.meshgrid(*[np.arange(n) + l for n, l in zip(shape, lo)], indexing="ij")
    inner = (slice(1, -1),) * 3
    ap = np.zeros(shape)
    plus = {0: "ae", 1: "an", 2: "at"}
    minus = {0: "aw", 1: "as_", 2: "ab"}
    for axis in range(3):
        n_glob = grid.shape[axis]
        periodic = grid.periodic[axis]
        for step, name in ((1, plus[axis]), (-1, minus[axis])):
            nb = [g.copy() for g in gidx]
            nb[axis] = nb[axis] + step
            exists = (nb[axis] >= 0) & (nb[axis] < n_glob)
            if periodic:
                nb[axis] %= n_glob
                exists[...] = True
            coef = np.where(exists, area_over_h[axis], 0.0)
            ap += coef
            if pin is not None:
                # the pinned value is zero, so its neighbours keep the full
                # diagonal and simply lose the coupling
                hits = (nb[0] == pin[0]) & (nb[1] == pin[1]) & (nb[2] == pin[2])
                coef = np.where(hits, 0.0, coef)
            getattr(sys_, name)[inner] = coef
    sys_.ap[inner] = ap
    if pin is not None:
        local = tuple(p - l for p, l in zip(pin, lo))
        if all(0 <= c < n for c, n in zip(local, shape)):
            idx = tuple(c + 1 for c in local)
            for name in NAMES[1:]:
                getattr(sys_, name)[idx] = 0.0
            # the neighbours' couplings were removed, so this row sums to 1
            sys_.ap[idx] = 1.0
            sys_.pinned.append(idx)
    sys_.mirror_ghost_couplings()
    return sys_


# ---------------------------------------------------------------------------
# Factorisation and relaxation
# ---------------------------------------------------------------------------

def sip_factor(A: StencilSystem, cfg: SipConfig | None = None, profiler=None):
    """Incomplete LU factors of ``A`` by Stone's recurrences (in-block couplings only)."""
    cfg = cfg or SipConfig()
    shape = A.shape
    out = [np.zeros(shape) for _ in range(7)]
    region = profiler.region("sip_factor", A.ncells) if profiler else _null()
    with region:
        bad = K.factorize(*A.coefficients(), float(cfg.alpha), *out)
    A.factorizations += 1
    if bad[0] >= 0:
        raise SingularFactorization(tuple(int(c) for c in bad))
    dtype = cfg.dtype
    lbp = (out[0] * out[3]).astype(dtype)
    if dtype != np.float64:
        out = [a.astype(dtype) for a in out]
    names = ("ap", "ae", "an", "at") if A.symmetric else NAMES
    coefs = {n: (getattr(A, n).astype(dtype) if dtype != np.float64 else getattr(A, n)) for n in names}
    return SipFactors(*out, precision=cfg.precision, stamp=(A.token, A.revision),
                      alpha=cfg.alpha, coefs=coefs, lbp=lbp)


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _fi_array(fi):
    return fi.data if isinstance(fi, Field) else fi


def residual_general(A: StencilSystem, fi):
    """``su + sum(a_nb * fi_nb) - ap * fi`` on the interior, using all six couplings."""
    res = np.empty(A.shape)
    K.residual_general(*A.coefficients(), A.su, _fi_array(fi), res)
    return res


def residual_symmetric(A: StencilSystem, fi):
    """Residual of a symmetric system reading only ``ae``, ``an`` and ``at``."""
    if not A.symmetric:
        raise NotSymmetric("residual_symmetric needs a system flagged symmetric")
    res = np.empty(A.shape)
    K.residual_symmetric(A.ap, A.ae, A.an, A.at, A.su, _fi_array(fi), res)
    return res


def _check_fresh(A, F):
    if not F.valid_for(A):
        raise StaleFactorization(
            f"factors were built for revision {F.stamp[1]} of system {F.stamp[0]}, "
            f"system is now revision {A.revision} of {A.token}")


def _resforward(A, F, su, fi, r):
    c = F.coefs
    short = A.shape[2] < K.SHORT_LINE
    if A.symmetric:
        kern = K.resforward_symmetric_short if short else K.resforward_symmetric
        return kern(c["ap"], c["ae"], c["an"], c["at"], su, fi, *F.lower(), r)
    kern = K.resforward_general_short if short else K.resforward_general
    return kern(*(c[n] for n in NAMES), su, fi, *F.lower(), r)


def sip_sweep(A: StencilSystem, F: SipFactors, fi):
    """One SIP iteration in place on ``fi`` (ghosts must be current).

    Returns the L1 norm of the residual *before* the update.
    """
    _check_fresh(A, F)
    r = np.zeros(tuple(n + 2 for n in A.shape), dtype=F.dtype)
    data = _fi_array(fi)
    su = A.su if F.dtype == np.float64 else A.su.astype(F.dtype)
    norm = _resforward(A, F, su, data, r)
    K.backward(*F.upper(), r, data)
    return float(norm)


class _Relaxer:
    """Sweep loop shared by the double and the mixed-precision paths of :func:`solve`."""

    def __init__(self, A, F, comm, profiler, report, cfg):
        self.A, self.F, self.comm, self.prof = A, F, comm, profiler
        self.report, self.cfg = report, cfg
        self.r = np.zeros(tuple(n + 2 for n in A.shape), dtype=F.dtype)
        self.weight = 0.5 if F.dtype == np.float32 else 1.0

    def region(self, name, weight=1.0):
        return self.prof.region(name, self.A.ncells, weight) if self.prof else _null()

    def exchange(self, field):
        if self.comm is not None:
            self.comm.exchange(field)

    def reduce(self, value):
        return self.comm.all_reduce(value, "sum") if self.comm is not None else value

    def resforward(self, su, x):
        with self.region("sip_resforward", self.weight):
            return float(_resforward(self.A, self.F, su, x.data, self.r))

    def true_residual(self, fi):
        """Residual and global norm in double precision (refinement steps)."""
        self.exchange(fi)
        res = np.empty(self.A.shape)
        with self.region("sip_residual"):
            if self.A.symmetric:
                local = K.residual_symmetric(self.A.ap, self.A.ae, self.A.an, self.A.at,
                                             self.A.su, fi.data, res)
            else:
                local = K.residual_general(*self.A.coefficients(), self.A.su, fi.data, res)
        return res, self.reduce(float(local))

    def sweeps(self, su, x, budget, target=None, reduction=None, stall=False):
        """Relax on ``x`` until the norm reaches ``target``; returns (sweeps, norm, first norm).

        Without ``target`` it is ``reduction`` times the initial norm.
        """
        hist = self.report.history
        self.exchange(x)
        norm = first = self.reduce(self.resforward(su, x))
        if target is None:
            target = reduction * first
        it = 0
        start = len(hist)
        while it < budget and norm > target and norm > 0.0:
            with self.region("sip_backward", self.weight):
                K.backward(*self.F.upper(), self.r, x.data)
            it += 1
            self.exchange(x)
            local = self.resforward(su, x)
            evaluate = it % self.cfg.norm_every == 0 or it == budget
            if evaluate:
                norm = self.reduce(local)
            hist.append(norm)
            # single-precision residuals bottom out at a rounding floor
            if stall and evaluate and len(hist) - start >= 10 and norm > 0.9 * hist[-10]:
                break
        return it, norm, first


def solve(A: StencilSystem, fi: Field, cfg: SipConfig | None = None, factors=None,
          comm=None, profiler=None):
    """Relax ``A fi = su`` until the residual norm drops by ``cfg.reduction``.

    ``fi`` is updated in place and returned with a :class:`SolveReport`.
    Factorisation happens at most once per call, and not at all when valid
    ``factors`` are passed in. With ``comm`` (anything offering
    ``exchange(field)`` and ``all_reduce(value, op)``) the ghost layer of
    ``fi`` is refreshed before every residual evaluation and norms are summed
    over all ranks.

    With single-precision factors the sweeps work on a correction ``e`` with
    float32 residual, forward and backward arrays. The double-precision
    residual is recomputed after the float32 iteration stalls, and the
    correction restarts from zero, so the solve can reach reductions below
    float32 resolution.
    """
    cfg = cfg or SipConfig()
    if profiler is None and comm is not None:
        profiler = getattr(comm, "profiler", None)
    report = SolveReport(precision=cfg.precision)
    t0 = time.perf_counter()
    if factors is None:
        factors = sip_factor(A, cfg, profiler)
        report.factorized = True
    else:
        _check_fresh(A, factors)
    report.precision = factors.precision
    t1 = time.perf_counter()
    report.t_factor = t1 - t0
    relax = _Relaxer(A, factors, comm, profiler, report, cfg)

    if factors.dtype == np.float64:
        it, norm, norm0 = relax.sweeps(A.su, fi, cfg.max_iters, reduction=cfg.reduction)
        report.initial_norm, report.final_norm, report.iterations = norm0, norm, it
    else:
        res, norm0 = relax.true_residual(fi)
        target = cfg.reduction * norm0
        norm, total = norm0, 0
        e = Field(A.shape, dtype=np.float64, block=fi.block, name="correction")
        su = np.zeros(tuple(n + 2 for n in A.shape), dtype=factors.dtype)
        while norm > target and norm > 0.0 and total < cfg.max_iters:
            su[1:-1, 1:-1, 1:-1] = res
            e.data[...] = 0.0
            it, _, _ = relax.sweeps(su, e, cfg.max_iters - total, target=target, stall=True)
            if it == 0:
                break
            total += it
            fi.interior[...] += e.interior
            res, norm = relax.true_residual(fi)
            report.history[-1] = norm
        report.initial_norm, report.final_norm, report.iterations = norm0, norm, total
    report.t_relax = time.perf_counter() - t1
    return fi, report


__all__ = [
    "StencilSystem", "SipConfig", "SipFactors", "SolveReport", "assemble_poisson",
    "sip_factor", "residual_general", "residual_symmetric", "sip_sweep", "solve",
    "SipError", "SingularFactorization", "StaleFactorization", "NotSymmetric",
]
