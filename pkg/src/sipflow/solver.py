"""Explicit low-storage Runge-Kutta projection solver on the decomposed grid.

Velocities ``u, v, w`` and pressure ``p`` live at cell centres. Each block also
keeps face-normal velocities, which carry the mass fluxes. One time step runs
the stages of a two-register Runge-Kutta scheme. Each stage does this:

1. Refresh the ghost layers and evaluate the momentum right-hand side. It
   holds central convection with the face velocities, compact diffusion, the
   central pressure gradient and the body force.
2. Update with ``dq = A_s dq + dt R`` and ``u += B_s dq``.
3. Interpolate face velocities from the provisional cell values.
4. Project with the pressure correction, until the divergence is below the
   mass threshold.

   - The mass defect of every cell, divided by ``tau = B_s dt``, becomes the
     source of the pressure-correction system.
   - That system is assembled and factorised once per run, then solved with
     a few SIP sweeps.
   - Faces are corrected with the compact gradient of ``p'``, cells with the
     central one, and ``p`` accumulates ``p'``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import comm as cm
from . import _kernels as K
from . import mesh, sip
from .perf import merge_timers, profile_report

CASES = ("taylor-green", "channel-laminar", "manufactured-poisson")
DIAGNOSTIC_COLUMNS = ("step", "t", "kinetic_energy", "divergence_l1", "outer_iterations",
                      "pp_reduction", "checkerboard")


class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, defect, step, stage, outer):
        super().__init__(f"mass defect {defect:.3e} above threshold after {outer} outer "
                         f"iterations (step {step}, stage {stage})")
        self.defect = defect
        self.step = step


class FlowDiverged(SolverError):
    def __init__(self, step):
        super().__init__(f"non-finite values detected at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Runge-Kutta schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RKScheme:
    """Two-register scheme: ``dq = A[s] dq + dt R``, ``u += B[s] dq``."""

    A: tuple
    B: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.A) != len(self.B) or not self.A:
            raise ValueError("A and B need one entry per stage")
        if self.A[0] != 0:
            raise ValueError("the first stage must start from an empty register (A[0] = 0)")
        w = self.effective_weights()
        if not math.isclose(sum(w), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"effective weights sum to {sum(w)}, not 1")

    @property
    def stages(self):
        return len(self.A)

    def effective_weights(self):
        """Weight of each stage's right-hand side in the completed step."""
        n = self.stages
        w = [0.0] * n
        for r in range(n):
            carry = 1.0
            for s in range(r, n):
                if s > r:
                    carry *= self.A[s]
                w[r] += self.B[s] * carry
        return w

    def stage_times(self):
        """Fraction of the step reached at the end of each stage."""
        c, out, carry = 0.0, [], 0.0
        for a, b in zip(self.A, self.B):
            carry = a * carry + 1.0
            c += b * carry
            out.append(c)
        return out


WILLIAMSON3 = RKScheme((0.0, -5.0 / 9.0, -153.0 / 128.0), (1.0 / 3.0, 15.0 / 16.0, 8.0 / 15.0),
                       "williamson3")
FORWARD_EULER = RKScheme((0.0,), (1.0,), "euler")


# ---------------------------------------------------------------------------
# Case setup
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseSetup:
    case: str
    grid: mesh.GridSpec
    nu: float = 0.01
    dt: float = 0.05
    t_end: float = 0.0
    blocks: tuple = (1, 1, 1)
    mass_threshold: float = 1e-10
    body_force: tuple = (0.0, 0.0, 0.0)
    alpha: float = 0.92
    sweeps: int = 10
    max_outer: int = 500
    converge_stages: str = "all"
    scheme: RKScheme = WILLIAMSON3
    cfl_limit: float = 1.0
    diffusion_limit: float = 0.6
    velocity_scale: float = 1.0
    max_steps: int | None = None
    fixed_outer: int | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}; choose from {', '.join(CASES)}")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if not self.mass_threshold > 0:
            raise ValueError("mass threshold must be positive")
        if self.sweeps < 1 or self.max_outer < 1:
            raise ValueError("sweeps and max_outer must be >= 1")
        if self.fixed_outer is not None and self.fixed_outer < 1:
            raise ValueError("fixed_outer must be >= 1")
        if self.converge_stages not in ("all", "final"):
            raise ValueError("converge_stages must be 'all' or 'final'")

    @property
    def nsteps(self):
        if self.case == "manufactured-poisson":
            return 0
        n = max(1, round(self.t_end / self.dt))
        return n if self.max_steps is None else min(n, self.max_steps)

    @property
    def step_dt(self):
        """Time step actually used, so that ``nsteps`` steps land on ``t_end``."""
        if self.max_steps is not None and self.max_steps < max(1, round(self.t_end / self.dt)):
            return self.dt
        return self.t_end / self.nsteps if self.nsteps else self.dt

    def stability_numbers(self):
        h = self.grid.spacing
        dt = self.step_dt
        cfl = self.velocity_scale * dt / min(h)
        diff = self.nu * dt * sum(1.0 / x ** 2 for x in h)
        return cfl, diff

    def validate(self):
        """Raise ``ValueError`` if the explicit time step is out of bounds."""
        if self.case == "manufactured-poisson":
            return
        cfl, diff = self.stability_numbers()
        if cfl > self.cfl_limit:
            raise ValueError(f"dt: convective number {cfl:.3f} exceeds {self.cfl_limit}")
        if diff > self.diffusion_limit:
            raise ValueError(f"dt: diffusion number {diff:.3f} exceeds {self.diffusion_limit}")

    def decomposition(self, nranks=None):
        return mesh.decompose(self.grid, *self.blocks, nranks=nranks)

    # -- standard cases -----------------------------------------------------
    @classmethod
    def taylor_green(cls, n=64, nz=2, nu=0.01, dt=0.05, t_end=2 * math.pi, **kw):
        """2D vortex on ``[0, 2 pi]^2`` (one period in time is ``t = 2 pi``)."""
        lz = 2 * math.pi * nz / n
        grid = mesh.GridSpec(n, n, nz, 2 * math.pi, 2 * math.pi, lz)
        return cls("taylor-green", grid, nu=nu, dt=dt, t_end=t_end, **kw)

    @classmethod
    def channel_laminar(cls, ny=64, nx=4, nz=2, nu=0.1, force=1.0, dt=None, t_end=None, **kw):
        """Plane channel of height 1 between no-slip walls, driven by a body force in x."""
        h = 1.0 / ny
        grid = mesh.GridSpec(nx, ny, nz, 4 * h * nx, 1.0, 4 * h * nz,
                             bc=(("periodic", "periodic"), ("wall", "wall"),
                                 ("periodic", "periodic")))
        dt = 0.5 * h * h / nu if dt is None else dt
        t_end = 0.5 / nu if t_end is None else t_end
        umax = force / (8 * nu)
        return cls("channel-laminar", grid, nu=nu, dt=dt, t_end=t_end,
                   body_force=(force, 0.0, 0.0), velocity_scale=umax, **kw)

    @classmethod
    def manufactured_poisson(cls, n=16, **kw):
        grid = mesh.GridSpec(n, n, n, bc=(("wall", "wall"),) * 3)
        return cls("manufactured-poisson", grid, **kw)

    @classmethod
    def build(cls, case, nx=None, ny=None, nz=None, **kw):
        """Case factory with optional grid overrides (used by the CLI)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        if case == "taylor-green":
            n = nx or ny or 64
            if nx and ny and nx != ny:
                grid = mesh.GridSpec(nx, ny, nz or 2, 2 * math.pi, 2 * math.pi,
                                     2 * math.pi * (nz or 2) / nx)
                return cls(case, grid, **{"t_end": 2 * math.pi, **kw})
            return cls.taylor_green(n, nz or 2, **kw)
        if case == "channel-laminar":
            return cls.channel_laminar(ny or 64, nx or 4, nz or 2, **kw)
        if case == "manufactured-poisson":
            n = nx or 16
            grid = mesh.GridSpec(n, ny or n, nz or n, bc=(("wall", "wall"),) * 3)
            kw.pop("t_end", None)
            return cls(case, grid, **kw)
        raise ValueError(f"unknown case {case!r}")


# ---------------------------------------------------------------------------
# Block geometry and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockGeometry:
    shape: tuple
    spacing: tuple
    lo: tuple
    sides: dict  # (axis, -1 | +1) -> "wall" | "symmetry" | None (neighbour or periodic)

    @classmethod
    def of(cls, grid, block):
        sides = {}
        for axis in range(3):
            for sign, at_edge in ((-1, block.lo[axis] == 0),
                                  (1, block.hi[axis] == grid.shape[axis])):
                kind = grid.bc[axis][0 if sign < 0 else 1]
                sides[(axis, sign)] = kind if at_edge and kind != "periodic" else None
        return cls(block.shape, grid.spacing, block.lo, sides)

    @property
    def volume(self):
        hx, hy, hz = self.spacing
        return hx * hy * hz

    @property
    def areas(self):
        hx, hy, hz = self.spacing
        return (hy * hz, hx * hz, hx * hy)

    @property
    def ncells(self):
        return int(np.prod(self.shape))


@dataclass
class FlowState:
    u: mesh.Field
    v: mesh.Field
    w: mesh.Field
    p: mesh.Field
    faces: list
    geom: BlockGeometry
    t: float = 0.0
    step: int = 0

    @property
    def velocity(self):
        return (self.u, self.v, self.w)

    @classmethod
    def zeros(cls, block, geom):
        f = [mesh.Field(block.shape, block=block.id, name=n) for n in "uvwp"]
        nx, ny, nz = block.shape
        faces = [np.zeros((nx + 1, ny, nz)), np.zeros((nx, ny + 1, nz)), np.zeros((nx, ny, nz + 1))]
        return cls(*f, faces=faces, geom=geom)


def _interior(a):
    return a[1:-1, 1:-1, 1:-1]


def _shift(a, axis, d):
    """Interior-shaped view of a padded array shifted by ``d`` along ``axis``."""
    sl = [slice(1, -1)] * 3
    n = a.shape[axis]
    sl[axis] = slice(1 + d, n - 1 + d)
    return a[tuple(sl)]


def _face_pair(a, axis):
    """Views of the cells on the low and high side of every face along ``axis``."""
    lo = [slice(1, -1)] * 3
    hi = [slice(1, -1)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return a[tuple(lo)], a[tuple(hi)]


def _ghost(a, axis, sign):
    sl = [slice(1, -1)] * 3
    sl[axis] = 0 if sign < 0 else a.shape[axis] - 1
    return tuple(sl)


def _inner(a, axis, sign):
    sl = [slice(1, -1)] * 3
    sl[axis] = 1 if sign < 0 else a.shape[axis] - 2
    return tuple(sl)


def apply_wall_ghosts(geom, velocity=None, scalars=()):
    """Ghost values at physical boundaries.

    No-slip walls mirror every velocity component with a sign change;
    symmetry planes only flip the normal component. Scalars (pressure) get a
    zero normal gradient.
    """
    for (axis, sign), kind in geom.sides.items():
        if kind is None:
            continue
        if velocity is not None:
            for comp, f in enumerate(velocity):
                d = f.data
                flip = kind == "wall" or comp == axis
                d[_ghost(d, axis, sign)] = -d[_inner(d, axis, sign)] if flip else d[_inner(d, axis, sign)]
        for f in scalars:
            d = f.data
            d[_ghost(d, axis, sign)] = d[_inner(d, axis, sign)]


def _zero_wall_faces(state):
    for (axis, sign), kind in state.geom.sides.items():
        if kind is not None:
            idx = [slice(None)] * 3
            idx[axis] = 0 if sign < 0 else -1
            state.faces[axis][tuple(idx)] = 0.0


def interpolate_faces(state):
    """Face-normal velocities as the mean of the two adjacent cells."""
    for axis, f in enumerate(state.velocity):
        lo, hi = _face_pair(f.data, axis)
        np.multiply(lo + hi, 0.5, out=state.faces[axis])
    _zero_wall_faces(state)


def net_outflow(state):
    """Volume flux leaving every cell (the discrete divergence times the volume)."""
    ax = state.geom.areas
    fx, fy, fz = state.faces
    return (ax[0] * (fx[1:] - fx[:-1]) + ax[1] * (fy[:, 1:] - fy[:, :-1])
            + ax[2] * (fz[:, :, 1:] - fz[:, :, :-1]))


def compute_fluxes(state, nu, body_force=(0.0, 0.0, 0.0)):
    """Momentum right-hand side per unit volume for ``u, v, w``.

    Central convection with the face velocities, compact second-order
    diffusion, central pressure gradient and a uniform body force.
    """
    g = state.geom
    areas, h, vol = g.areas, g.spacing, g.volume
    pd = state.p.data
    out = []
    for comp, f in enumerate(state.velocity):
        d = f.data
        conv = np.zeros(g.shape)
        diff = np.zeros(g.shape)
        for axis in range(3):
            lo, hi = _face_pair(d, axis)
            flux = state.faces[axis] * (0.5 * (lo + hi)) * areas[axis]
            sl_hi = [slice(None)] * 3
            sl_lo = [slice(None)] * 3
            sl_hi[axis] = slice(1, None)
            sl_lo[axis] = slice(None, -1)
            conv += flux[tuple(sl_hi)] - flux[tuple(sl_lo)]
            diff += (_shift(d, axis, 1) - 2.0 * _interior(d) + _shift(d, axis, -1)) / (h[axis] * h[axis])
        grad = (_shift(pd, comp, 1) - _shift(pd, comp, -1)) / (2.0 * h[comp])
        out.append(-conv / vol + nu * diff - grad + body_force[comp])
    return out


def rk_stage(state, residuals, dq, scheme, stage, dt):
    """Low-storage update of the cell velocities; ``dq`` is the second register."""
    if not 0 <= stage < scheme.stages:
        raise ValueError(f"stage {stage} out of range for a {scheme.stages}-stage scheme")
    a, b = scheme.A[stage], scheme.B[stage]
    for f, r, q in zip(state.velocity, residuals, dq):
        q *= a
        q += dt * r
        _interior(f.data)[...] += b * q


def kinetic_energy_local(state):
    return 0.5 * sum(float(np.sum(_interior(f.data) ** 2)) for f in state.velocity) * state.geom.volume


def checkerboard_local(state):
    """Odd-even content of the pressure: ``(sum of (-1)^(i+j+k) p, sum of |p|)``."""
    p = _interior(state.p.data)
    lo = state.geom.lo
    idx = np.indices(p.shape).sum(axis=0) + sum(lo)
    sign = np.where(idx % 2 == 0, 1.0, -1.0)
    return float(np.sum(sign * p)), float(np.sum(np.abs(p)))


# ---------------------------------------------------------------------------
# Per-rank driver
# ---------------------------------------------------------------------------

@dataclass
class ProjectionInfo:
    outer: int = 0
    divergence: float = 0.0
    initial_norm: float = 0.0
    final_norm: float = 0.0

    @property
    def reduction(self):
        return self.final_norm / self.initial_norm if self.initial_norm > 0 else 0.0


class BlockSolver:
    """Everything one rank needs to advance its block."""

    def __init__(self, setup: CaseSetup, dec, block, ctx: cm.ExchangeContext, precision="double"):
        self.setup = setup
        self.dec = dec
        self.block = block
        self.ctx = ctx
        self.rank = ctx.rank
        self.prof = ctx.profiler
        self.geom = BlockGeometry.of(setup.grid, block)
        self.state = FlowState.zeros(block, self.geom)
        self.total_volume = setup.grid.lx * setup.grid.ly * setup.grid.lz
        self.dt = setup.step_dt
        self.sipcfg = sip.SipConfig(alpha=setup.alpha, max_iters=setup.sweeps, reduction=0.0,
                                    precision=precision, norm_every=setup.sweeps)
        self.A = sip.assemble_poisson(block, setup.grid, self.dt, pin=None)
        self.F = sip.sip_factor(self.A, self.sipcfg, self.prof)
        self.pp = mesh.Field(block.shape, block=block.id, name="pp")
        self.pp_sum = mesh.Field(block.shape, block=block.id, name="pp_sum")
        self.dq = [np.zeros(block.shape) for _ in range(3)]

    # -- helpers --------------------------------------------------------------
    def region(self, name):
        return self.rank.compute(name, self.geom.ncells)

    def refresh(self, fields, velocity=False, scalars=()):
        self.ctx.exchange(fields)
        with self.region("boundary_conditions"):
            apply_wall_ghosts(self.geom, self.state.velocity if velocity else None, scalars)

    def global_sum(self, value):
        return self.ctx.all_reduce(value, "sum")

    def divergence_l1(self, m):
        return self.global_sum(float(np.sum(np.abs(m)))) / self.total_volume

    # -- initial conditions ---------------------------------------------------
    def initialise(self):
        s, setup = self.state, self.setup
        x, y, z = mesh.cell_centers(setup.grid, self.block)
        if setup.case == "taylor-green":
            s.u.interior[...] = np.sin(x) * np.cos(y)
            s.v.interior[...] = -np.cos(x) * np.sin(y)
            s.p.interior[...] = 0.25 * (np.cos(2 * x) + np.cos(2 * y))
        self.refresh([s.u, s.v, s.w, s.p], velocity=True, scalars=(s.p,))
        with self.region("face_interpolation"):
            interpolate_faces(s)
        self.project(tau=self.dt, converge=True, stage=-1)

    # -- pressure correction --------------------------------------------------
    def project(self, tau, converge, stage, register_scale=None, cap=None):
        """Pressure-correction loop for the current face velocities.

        Each outer iteration solves for a correction ``p'`` with a few SIP
        sweeps and applies its compact gradient to the faces, which is all the
        next divergence evaluation needs. Cell velocities, pressure and the RK
        register depend linearly on ``p'``, so they are corrected once with
        the accumulated sum when the loop ends.
        """
        s, setup, A = self.state, self.setup, self.A
        info = ProjectionInfo()
        if cap is None:
            cap = setup.max_outer if converge else 1
        h, areas = self.geom.spacing, self.geom.areas
        m = np.empty(self.geom.shape)
        total = self.pp_sum.data
        total[...] = 0.0
        outer = 0
        while True:
            with self.region("mass_defect"):
                local = K.outflow(*s.faces, *areas, m)
            div = self.global_sum(local) / self.total_volume
            info.divergence = div
            if converge and div <= setup.mass_threshold:
                break
            if outer >= cap:
                if converge:
                    raise NonConvergence(div, s.step, stage, outer)
                break
            A.set_source(-m / tau)
            self.pp.data[...] = 0.0
            _, rep = sip.solve(A, self.pp, self.sipcfg, self.F, comm=self.ctx)
            if outer == 0:
                info.initial_norm = rep.initial_norm
            info.final_norm = rep.final_norm
            self.refresh(self.pp, scalars=(self.pp,))
            with self.region("pressure_update"):
                K.correct_faces(*s.faces, self.pp.data, tau / h[0], tau / h[1], tau / h[2])
                total += self.pp.data
            outer += 1
        if outer:
            with self.region("pressure_update"):
                self._correct(tau, register_scale)
        info.outer = outer
        return info

    def _correct(self, tau, register_scale=None):
        """Cell-centred part of the correction with the accumulated ``p'``."""
        s, h = self.state, self.geom.spacing
        ppd = self.pp_sum.data
        for axis in range(3):
            grad = (_shift(ppd, axis, 1) - _shift(ppd, axis, -1)) / (2.0 * h[axis])
            _interior(s.velocity[axis].data)[...] -= tau * grad
            if register_scale is not None:
                # keep the RK register consistent with the projected velocity
                self.dq[axis] -= register_scale * grad
        _zero_wall_faces(s)
        # the pressure level is arbitrary; keep its global mean at zero
        shift = self.global_sum(float(np.sum(_interior(ppd)))) / self.setup.grid.ncells
        _interior(s.p.data)[...] += _interior(ppd) - shift

    # -- time stepping --------------------------------------------------------
    def step(self):
        s, setup, scheme = self.state, self.setup, self.setup.scheme
        dt = self.dt
        for q in self.dq:
            q[...] = 0.0
        info = None
        for stage in range(scheme.stages):
            self.refresh([s.u, s.v, s.w, s.p], velocity=True, scalars=(s.p,))
            with self.region("fluxes"):
                res = compute_fluxes(s, setup.nu, setup.body_force)
            with self.region("rk_update"):
                rk_stage(s, res, self.dq, scheme, stage, dt)
            self.refresh([s.u, s.v, s.w], velocity=True)
            with self.region("face_interpolation"):
                interpolate_faces(s)
            tau = scheme.B[stage] * dt
            if setup.fixed_outer is not None:
                # benchmark mode: the same work in every step, no convergence test
                info = self.project(tau, False, stage, register_scale=dt, cap=setup.fixed_outer)
            else:
                last = stage == scheme.stages - 1
                converge = last or setup.converge_stages == "all"
                info = self.project(tau, converge, stage, register_scale=dt)
        s.t += dt
        s.step += 1
        return info

    def diagnostics(self, info):
        s = self.state
        with self.region("kinetic_energy"):
            ke_local = kinetic_energy_local(s)
            cb = checkerboard_local(s)
        ke, cb_num, cb_den = self.global_sum(np.array([ke_local, cb[0], cb[1]]))
        ke /= self.total_volume
        if not np.isfinite(ke):
            raise FlowDiverged(s.step)
        return (s.step, s.t, float(ke), info.divergence, info.outer, info.reduction,
                abs(cb_num) / cb_den if cb_den > 0 else 0.0)

    def manufactured_solve(self):
        """Single SIP solve of the Poisson problem with a cosine solution."""
        setup = self.setup
        x, y, z = mesh.cell_centers(setup.grid, self.block)
        k = 2 * np.pi
        exact = np.cos(k * x) * np.cos(k * y) * np.cos(k * z)
        cfg = sip.SipConfig(alpha=setup.alpha, max_iters=5000, reduction=1e-8,
                            precision=self.sipcfg.precision)
        self.A.set_source(3 * k * k * exact * setup.grid.cell_volume())
        F = self.F
        phi = self.state.p
        phi.data[...] = 0.0
        _, rep = sip.solve(self.A, phi, cfg, F, comm=self.ctx)
        n = setup.grid.ncells
        mean_num = self.global_sum(float(phi.interior.sum()))
        mean_ex = self.global_sum(float(exact.sum()))
        err = np.abs((phi.interior - mean_num / n) - (exact - mean_ex / n)).max()
        err = self.ctx.all_reduce(float(err), "max")
        return rep, err


def pressure_correct(solver: BlockSolver, tau, converge=True, stage=-1):
    """Project the block's velocities; see :meth:`BlockSolver.project`."""
    return solver.project(tau, converge, stage)


def _rank_main(rank, setup, dec, tables, strategy, precision, record_events):
    block = dec.blocks_of_rank(rank.rank)[0]
    ctx = cm.ExchangeContext(rank, dec, tables[rank.rank], strategy)
    rank.events.enabled = record_events
    bs = BlockSolver(setup, dec, block, ctx, precision)
    rows, step_times, extra = [], [], {}
    if setup.case == "manufactured-poisson":
        rep, err = bs.manufactured_solve()
        extra = {"error_linf": err, "iterations": rep.iterations,
                 "reduction": rep.reduction, "history": list(rep.history)}
        rows.append((0, 0.0, 0.0, 0.0, 0, rep.reduction, 0.0))
    else:
        bs.initialise()
        rows.append(bs.diagnostics(ProjectionInfo(divergence=bs.divergence_l1(net_outflow(bs.state)))))
        for _ in range(setup.nsteps):
            t0 = rank.now()
            info = bs.step()
            rows.append(bs.diagnostics(info))
            step_times.append(rank.now() - t0)
    s = bs.state
    return {
        "block": block.id,
        "fields": {n: getattr(s, n).interior.copy() for n in "uvwp"},
        "rows": rows,
        "step_times": step_times,
        "timers": rank.profiler.timers(),
        "events": rank.events,
        "factorizations": bs.A.factorizations,
        "messages": ctx.messages,
        "extra": extra,
    }


@dataclass
class RunResult:
    setup: CaseSetup
    strategy: str
    precision: str
    nranks: int
    fields: dict
    rows: list
    step_times: list
    timers: list
    events: list
    factorizations: list
    extra: dict = field(default_factory=dict)

    @property
    def profile(self):
        return profile_report(merge_timers(self.timers))

    def diagnostics_csv(self):
        out = io.StringIO()
        out.write(f"# case={self.setup.case} precision={self.precision} strategy={self.strategy} "
                  f"ranks={self.nranks}\n")
        out.write(",".join(DIAGNOSTIC_COLUMNS) + "\n")
        for r in self.rows:
            out.write(f"{r[0]},{r[1]:.12g},{r[2]:.15e},{r[3]:.6e},{r[4]},{r[5]:.6e},{r[6]:.6e}\n")
        return out.getvalue()

    def events_csv(self):
        return cm.events_csv(self.events)

    @property
    def kinetic_energy(self):
        return np.array([r[2] for r in self.rows])

    @property
    def times(self):
        return np.array([r[1] for r in self.rows])


def run_case(setup: CaseSetup, strategy="blocking", precision="double", net=None,
             record_events=True):
    """Run a case on one virtual rank per block; returns a :class:`RunResult`.

    ``net`` defaults to a wall-clock fabric with as many ranks as blocks.
    """
    setup.validate()
    dec = setup.decomposition()
    if net is None:
        net = cm.NetConfig(nranks=dec.nblocks)
    elif net.nranks != dec.nblocks:
        raise ValueError(f"ranks: {net.nranks} ranks for {dec.nblocks} blocks; "
                         "the solver runs one block per rank")
    tables = mesh.build_transfer_tables(dec)
    cm.check_tables(tables)
    out = cm.run_ranks(net, _rank_main, setup, dec, tables, strategy, precision, record_events)
    fields = {n: dec.gather({o["block"]: o["fields"][n] for o in out}) for n in "uvwp"}
    per_step = [max(ts) for ts in zip(*(o["step_times"] for o in out))] if out[0]["step_times"] else []
    return RunResult(setup, strategy, precision, net.nranks, fields, out[0]["rows"], per_step,
                     [o["timers"] for o in out], [o["events"] for o in out],
                     [o["factorizations"] for o in out], out[0]["extra"])


def poiseuille_profile(setup: CaseSetup):
    """Analytic laminar channel profile at the cell centres across the channel."""
    g = setup.grid
    y = (np.arange(g.ny) + 0.5) * g.ly / g.ny
    return setup.body_force[0] / (2 * setup.nu) * y * (g.ly - y)


__all__ = [
    "RKScheme", "WILLIAMSON3", "FORWARD_EULER", "CaseSetup", "FlowState", "BlockGeometry",
    "compute_fluxes", "rk_stage", "interpolate_faces", "net_outflow", "apply_wall_ghosts",
    "BlockSolver", "run_case", "RunResult", "poiseuille_profile", "SolverError",
    "NonConvergence", "FlowDiverged", "CASES", "pressure_correct",
]
