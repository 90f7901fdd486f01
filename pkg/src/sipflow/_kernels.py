"""Compiled loops for the seven-point SIP solver.

Coefficient, source and solution arrays are padded (one ghost layer), factor
arrays are interior-shaped. Loops run k fastest; the lower factors only refer
to the bottom, west and south neighbours, all of which are visited before the
current cell in any lexicographic order, so the results do not depend on
which axis runs fastest.
"""
import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)


@_jit
def residual_general(ap, ae, aw, an, as_, at, ab, su, fi, res):
    nx, ny, nz = res.shape
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            for k in range(1, nz + 1):
                r = (ae[i, j, k] * fi[i + 1, j, k] + aw[i, j, k] * fi[i - 1, j, k]
                     + an[i, j, k] * fi[i, j + 1, k] + as_[i, j, k] * fi[i, j - 1, k]
                     + at[i, j, k] * fi[i, j, k + 1] + ab[i, j, k] * fi[i, j, k - 1]
                     + su[i, j, k] - ap[i, j, k] * fi[i, j, k])
                res[i - 1, j - 1, k - 1] = r
                total += abs(r)
    return total


@_jit
def residual_symmetric(ap, ae, an, at, su, fi, res):
    nx, ny, nz = res.shape
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            for k in range(1, nz + 1):
                r = (ae[i, j, k] * fi[i + 1, j, k] + ae[i - 1, j, k] * fi[i - 1, j, k]
                     + an[i, j, k] * fi[i, j + 1, k] + an[i, j - 1, k] * fi[i, j - 1, k]
                     + at[i, j, k] * fi[i, j, k + 1] + at[i, j, k - 1] * fi[i, j, k - 1]
                     + su[i, j, k] - ap[i, j, k] * fi[i, j, k])
                res[i - 1, j - 1, k - 1] = r
                total += abs(r)
    return total


@_jit
def factorize(ap, ae, aw, an, as_, at, ab, alpha, lb, lw, ls, lp, un, ue, ut):
    """Stone's incomplete factorisation restricted to in-block couplings.

    Returns (-1, -1, -1) on success or the interior index of a vanishing pivot.
    """
    nx, ny, nz = lp.shape
    for i0 in range(nx):
        for j0 in range(ny):
            for k0 in range(nz):
                i, j, k = i0 + 1, j0 + 1, k0 + 1
                mb = -ab[i, j, k] if k0 > 0 else 0.0
                mw = -aw[i, j, k] if i0 > 0 else 0.0
                ms = -as_[i, j, k] if j0 > 0 else 0.0
                mt = -at[i, j, k] if k0 < nz - 1 else 0.0
                me = -ae[i, j, k] if i0 < nx - 1 else 0.0
                mn = -an[i, j, k] if j0 < ny - 1 else 0.0
                unb = ueb = utb = 0.0
                unw = uew = utw = 0.0
                uns = ues = uts = 0.0
                if k0 > 0:
                    unb = un[i0, j0, k0 - 1]
                    ueb = ue[i0, j0, k0 - 1]
                    utb = ut[i0, j0, k0 - 1]
                if i0 > 0:
                    unw = un[i0 - 1, j0, k0]
                    uew = ue[i0 - 1, j0, k0]
                    utw = ut[i0 - 1, j0, k0]
                if j0 > 0:
                    uns = un[i0, j0 - 1, k0]
                    ues = ue[i0, j0 - 1, k0]
                    uts = ut[i0, j0 - 1, k0]
                b = mb / (1.0 + alpha * (unb + ueb))
                w = mw / (1.0 + alpha * (unw + utw))
                s = ms / (1.0 + alpha * (ues + uts))
                p1 = alpha * (b * unb + w * unw)
                p2 = alpha * (b * ueb + s * ues)
                p3 = alpha * (w * utw + s * uts)
                piv = ap[i, j, k] + p1 + p2 + p3 - b * utb - w * uew - s * uns
                if abs(piv) < 1e-30:
                    return i0, j0, k0
                inv = 1.0 / piv
                lb[i0, j0, k0] = b
                lw[i0, j0, k0] = w
                ls[i0, j0, k0] = s
                lp[i0, j0, k0] = inv
                # factors pointing out of the block stay zero
                un[i0, j0, k0] = (mn - p1) * inv if j0 < ny - 1 else 0.0
                ue[i0, j0, k0] = (me - p2) * inv if i0 < nx - 1 else 0.0
                ut[i0, j0, k0] = (mt - p3) * inv if k0 < nz - 1 else 0.0
    return -1, -1, -1


# The sweep kernels split each k-line into a part that vectorises and a short
# recurrence along k; ``lbp`` is ``lb * lp`` so the recurrence is one FMA.
_fast = nb.njit(cache=True, nogil=True, fastmath={"reassoc", "contract", "nsz"})


@_fast
def forward(res, lbp, lw, ls, lp, r):
    """Forward substitution into the padded work array ``r`` (ghosts are zero)."""
    nx, ny, nz = lp.shape
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                r[i, j, k] = lp[i0, j0, k - 1] * (res[i0, j0, k - 1] - lw[i0, j0, k - 1] * r[i - 1, j, k]
                                                  - ls[i0, j0, k - 1] * r[i, j - 1, k])
            for k in range(1, nz + 1):
                r[i, j, k] -= lbp[i0, j0, k - 1] * r[i, j, k - 1]


@_fast
def resforward_symmetric(ap, ae, an, at, su, fi, lbp, lw, ls, lp, r):
    """Symmetric residual fused with forward substitution; returns the L1 norm.

    Arithmetic runs in the precision of ``r``; ``fi`` may be wider.
    """
    nx, ny, nz = lp.shape
    real = r.dtype.type
    line = np.empty(nz, dtype=r.dtype)
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                line[k - 1] = (ae[i, j, k] * real(fi[i + 1, j, k]) + ae[i - 1, j, k] * real(fi[i - 1, j, k])
                               + an[i, j, k] * real(fi[i, j + 1, k]) + an[i, j - 1, k] * real(fi[i, j - 1, k])
                               + at[i, j, k] * real(fi[i, j, k + 1]) + at[i, j, k - 1] * real(fi[i, j, k - 1])
                               + su[i, j, k] - ap[i, j, k] * real(fi[i, j, k]))
            s = 0.0
            for k in range(nz):
                s += abs(line[k])
            total += s
            for k in range(1, nz + 1):
                r[i, j, k] = lp[i0, j0, k - 1] * (line[k - 1] - lw[i0, j0, k - 1] * r[i - 1, j, k]
                                                  - ls[i0, j0, k - 1] * r[i, j - 1, k])
            for k in range(1, nz + 1):
                r[i, j, k] -= lbp[i0, j0, k - 1] * r[i, j, k - 1]
    return total


@_fast
def resforward_general(ap, ae, aw, an, as_, at, ab, su, fi, lbp, lw, ls, lp, r):
    nx, ny, nz = lp.shape
    real = r.dtype.type
    line = np.empty(nz, dtype=r.dtype)
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                line[k - 1] = (ae[i, j, k] * real(fi[i + 1, j, k]) + aw[i, j, k] * real(fi[i - 1, j, k])
                               + an[i, j, k] * real(fi[i, j + 1, k]) + as_[i, j, k] * real(fi[i, j - 1, k])
                               + at[i, j, k] * real(fi[i, j, k + 1]) + ab[i, j, k] * real(fi[i, j, k - 1])
                               + su[i, j, k] - ap[i, j, k] * real(fi[i, j, k]))
            s = 0.0
            for k in range(nz):
                s += abs(line[k])
            total += s
            for k in range(1, nz + 1):
                r[i, j, k] = lp[i0, j0, k - 1] * (line[k - 1] - lw[i0, j0, k - 1] * r[i - 1, j, k]
                                                  - ls[i0, j0, k - 1] * r[i, j - 1, k])
            for k in range(1, nz + 1):
                r[i, j, k] -= lbp[i0, j0, k - 1] * r[i, j, k - 1]
    return total


@_fast
def backward(un, ue, ut, r, fi):
    """Back substitution in place on ``r``, then ``fi += r`` on the interior."""
    nx, ny, nz = un.shape
    for i in range(nx, 0, -1):
        for j in range(ny, 0, -1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                r[i, j, k] -= un[i0, j0, k - 1] * r[i, j + 1, k] + ue[i0, j0, k - 1] * r[i + 1, j, k]
            for k in range(nz, 0, -1):
                r[i, j, k] -= ut[i0, j0, k - 1] * r[i, j, k + 1]
            for k in range(1, nz + 1):
                fi[i, j, k] += r[i, j, k]


# Short k-lines (thin grids) gain nothing from the split loops; these fuse
# residual and forward substitution per cell instead.
SHORT_LINE = 8


@_fast
def resforward_symmetric_short(ap, ae, an, at, su, fi, lbp, lw, ls, lp, r):
    nx, ny, nz = lp.shape
    real = r.dtype.type
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                v = (ae[i, j, k] * real(fi[i + 1, j, k]) + ae[i - 1, j, k] * real(fi[i - 1, j, k])
                     + an[i, j, k] * real(fi[i, j + 1, k]) + an[i, j - 1, k] * real(fi[i, j - 1, k])
                     + at[i, j, k] * real(fi[i, j, k + 1]) + at[i, j, k - 1] * real(fi[i, j, k - 1])
                     + su[i, j, k] - ap[i, j, k] * real(fi[i, j, k]))
                total += abs(v)
                r[i, j, k] = (lp[i0, j0, k - 1] * (v - lw[i0, j0, k - 1] * r[i - 1, j, k]
                                                   - ls[i0, j0, k - 1] * r[i, j - 1, k])
                              - lbp[i0, j0, k - 1] * r[i, j, k - 1])
    return total


@_fast
def resforward_general_short(ap, ae, aw, an, as_, at, ab, su, fi, lbp, lw, ls, lp, r):
    nx, ny, nz = lp.shape
    real = r.dtype.type
    total = 0.0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            i0, j0 = i - 1, j - 1
            for k in range(1, nz + 1):
                v = (ae[i, j, k] * real(fi[i + 1, j, k]) + aw[i, j, k] * real(fi[i - 1, j, k])
                     + an[i, j, k] * real(fi[i, j + 1, k]) + as_[i, j, k] * real(fi[i, j - 1, k])
                     + at[i, j, k] * real(fi[i, j, k + 1]) + ab[i, j, k] * real(fi[i, j, k - 1])
                     + su[i, j, k] - ap[i, j, k] * real(fi[i, j, k]))
                total += abs(v)
                r[i, j, k] = (lp[i0, j0, k - 1] * (v - lw[i0, j0, k - 1] * r[i - 1, j, k]
                                                   - ls[i0, j0, k - 1] * r[i, j - 1, k])
                              - lbp[i0, j0, k - 1] * r[i, j, k - 1])
    return total


def warmup():
    """Compile the float64 and mixed float32 specialisations up front."""
    for dt in (np.float64, np.float32):
        c = [np.ones((4, 4, 4), dtype=dt) for _ in range(8)]
        fi = np.zeros((4, 4, 4))
        f = [np.zeros((2, 2, 2), dtype=dt) for _ in range(7)]
        r = np.zeros((4, 4, 4), dtype=dt)
        res = np.zeros((2, 2, 2), dtype=dt)
        residual_general(*c, fi, res)
        residual_symmetric(c[0], c[1], c[3], c[5], c[7], fi, res)
        resforward_symmetric(c[0], c[1], c[3], c[5], c[7], fi, *f[:4], r)
        resforward_general(*c, fi, *f[:4], r)
        resforward_symmetric_short(c[0], c[1], c[3], c[5], c[7], fi, *f[:4], r)
        resforward_general_short(*c, fi, *f[:4], r)
        forward(res, *f[:4], r)
        backward(*f[4:], r, fi)


@_jit
def correct_faces(fx, fy, fz, pp, cx, cy, cz):
    """Subtract ``c * (p_hi - p_lo)`` from every face velocity; ``pp`` is padded."""
    nx, ny, nz = fx.shape[0] - 1, fy.shape[1] - 1, fz.shape[2] - 1
    for i in range(nx + 1):
        for j in range(ny):
            for k in range(nz):
                fx[i, j, k] -= cx * (pp[i + 1, j + 1, k + 1] - pp[i, j + 1, k + 1])
    for i in range(nx):
        for j in range(ny + 1):
            for k in range(nz):
                fy[i, j, k] -= cy * (pp[i + 1, j + 1, k + 1] - pp[i + 1, j, k + 1])
    for i in range(nx):
        for j in range(ny):
            for k in range(nz + 1):
                fz[i, j, k] -= cz * (pp[i + 1, j + 1, k + 1] - pp[i + 1, j + 1, k])


@_jit
def outflow(fx, fy, fz, ax, ay, az, m):
    """Net volume outflow per cell into ``m``; returns its L1 norm."""
    nx, ny, nz = m.shape
    total = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = (ax * (fx[i + 1, j, k] - fx[i, j, k]) + ay * (fy[i, j + 1, k] - fy[i, j, k])
                     + az * (fz[i, j, k + 1] - fz[i, j, k]))
                m[i, j, k] = v
                total += abs(v)
    return total


@_jit
def gather_scatter(dst, src, dst_idx, src_idx):
    """``dst[dst_idx] = src[src_idx]`` on flat views."""
    for n in range(dst_idx.size):
        dst[dst_idx[n]] = src[src_idx[n]]
