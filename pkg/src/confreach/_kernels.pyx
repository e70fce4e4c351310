# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.  Same contract as ``_kernels_py``; results must be
bitwise identical, so no -ffast-math and no reassociation of sums."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, exp, tanh, nextafter, ceil, isfinite, INFINITY, M_PI

cnp.import_array()

cdef enum:
    ACT_ID = 0
    ACT_SIGMOID = 1
    ACT_TANH = 2
    ACT_RELU = 3
    KIND_ENERGY = 1
    MAX_WIDTH = 256


cdef inline double _dn(double x, bint outward) nogil:
    return nextafter(x, -INFINITY) if outward else x


cdef inline double _up(double x, bint outward) nogil:
    return nextafter(x, INFINITY) if outward else x


cdef inline double _act(int code, double x) nogil:
    if code == ACT_SIGMOID:
        return 1.0 / (1.0 + exp(-x))
    if code == ACT_TANH:
        return tanh(x)
    if code == ACT_RELU:
        return x if x > 0.0 else 0.0
    return x


cdef inline double _clip_unit(double x) nogil:
    if x < -1.0:
        return -1.0
    if x > 1.0:
        return 1.0
    return x


cdef inline double _clamp(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef struct Ctrl:
    int kind
    int n_layers
    const long* dims
    const long* acts
    const double* theta
    double scale
    double shift
    double thrust


cdef struct Prm:
    double power, gravity, freq, goal, pmin, pmax, vmin, vmax


cdef class _PackView:
    """Holds typed buffers for a controller pack for the duration of a call."""
    cdef long[::1] dims
    cdef long[::1] acts
    cdef double[::1] theta
    cdef Ctrl c

    def __init__(self, pack):
        kind, dims, acts, theta, scale, shift, thrust = pack
        self.c.kind = kind
        self.c.scale = scale
        self.c.shift = shift
        self.c.thrust = thrust
        self.c.n_layers = len(acts)
        if kind != KIND_ENERGY:
            self.dims = np.ascontiguousarray(dims, dtype=np.int_)
            self.acts = np.ascontiguousarray(acts, dtype=np.int_)
            self.theta = np.ascontiguousarray(theta, dtype=np.float64)
            for d in dims:
                if d > MAX_WIDTH:
                    raise ValueError(f"layer width {d} exceeds compiled limit {MAX_WIDTH}")
            self.c.dims = &self.dims[0]
            self.c.acts = &self.acts[0]
            self.c.theta = &self.theta[0]


cdef inline Prm _prm(tuple prm):
    cdef Prm r
    r.power, r.gravity, r.freq, r.goal, r.pmin, r.pmax, r.vmin, r.vmax = prm
    return r


cdef double _ctrl_eval(const Ctrl* c, double y, double v) nogil:
    cdef double buf_a[MAX_WIDTH]
    cdef double buf_b[MAX_WIDTH]
    cdef double* x = buf_a
    cdef double* out = buf_b
    cdef double* tmp
    cdef double acc
    cdef long layer, i, j, nin, nout, off = 0, bo, row
    cdef int code
    if c.kind == KIND_ENERGY:
        return c.thrust if v >= 0.0 else -c.thrust
    x[0] = y
    x[1] = v
    for layer in range(c.n_layers):
        nin = c.dims[layer]
        nout = c.dims[layer + 1]
        bo = off + nin * nout
        code = <int>c.acts[layer]
        for j in range(nout):
            acc = c.theta[bo + j]
            row = off + j * nin
            for i in range(nin):
                acc = acc + c.theta[row + i] * x[i]
            out[j] = _act(code, acc)
        tmp = x
        x = out
        out = tmp
        off = bo + nout
    return _clip_unit(c.scale * x[0] + c.shift)


cdef void _act_bounds(int code, double* lo, double* hi, bint outward) nogil:
    lo[0] = _act(code, lo[0])
    hi[0] = _act(code, hi[0])
    if outward and code != ACT_RELU:
        lo[0] = nextafter(lo[0], -INFINITY)
        hi[0] = nextafter(hi[0], INFINITY)
        if code == ACT_SIGMOID:
            lo[0] = lo[0] if lo[0] > 0.0 else 0.0
            hi[0] = hi[0] if hi[0] < 1.0 else 1.0
        elif code == ACT_TANH:
            lo[0] = lo[0] if lo[0] > -1.0 else -1.0
            hi[0] = hi[0] if hi[0] < 1.0 else 1.0


cdef void _ctrl_interval(const Ctrl* c, double yl, double yh, double vl, double vh,
                         bint outward, double* rlo, double* rhi) nogil:
    cdef double lo_a[MAX_WIDTH]
    cdef double hi_a[MAX_WIDTH]
    cdef double lo_b[MAX_WIDTH]
    cdef double hi_b[MAX_WIDTH]
    cdef double* lo = lo_a
    cdef double* hi = hi_a
    cdef double* nlo = lo_b
    cdef double* nhi = hi_b
    cdef double* tmp
    cdef double alo, ahi, w, tlo, thi, olo, ohi
    cdef long layer, i, j, nin, nout, off = 0, bo, row
    cdef int code
    if c.kind == KIND_ENERGY:
        if vl >= 0.0:
            rlo[0] = c.thrust
            rhi[0] = c.thrust
        elif vh < 0.0:
            rlo[0] = -c.thrust
            rhi[0] = -c.thrust
        else:
            rlo[0] = -c.thrust
            rhi[0] = c.thrust
        return
    lo[0] = yl
    lo[1] = vl
    hi[0] = yh
    hi[1] = vh
    for layer in range(c.n_layers):
        nin = c.dims[layer]
        nout = c.dims[layer + 1]
        bo = off + nin * nout
        code = <int>c.acts[layer]
        for j in range(nout):
            alo = c.theta[bo + j]
            ahi = alo
            row = off + j * nin
            for i in range(nin):
                w = c.theta[row + i]
                if w >= 0.0:
                    tlo = w * lo[i]
                    thi = w * hi[i]
                else:
                    tlo = w * hi[i]
                    thi = w * lo[i]
                alo = _dn(alo + _dn(tlo, outward), outward)
                ahi = _up(ahi + _up(thi, outward), outward)
            _act_bounds(code, &alo, &ahi, outward)
            nlo[j] = alo
            nhi[j] = ahi
        tmp = lo
        lo = nlo
        nlo = tmp
        tmp = hi
        hi = nhi
        nhi = tmp
        off = bo + nout
    if c.scale >= 0.0:
        olo = c.scale * lo[0]
        ohi = c.scale * hi[0]
    else:
        olo = c.scale * hi[0]
        ohi = c.scale * lo[0]
    olo = _dn(_dn(olo, outward) + c.shift, outward)
    ohi = _up(_up(ohi, outward) + c.shift, outward)
    rlo[0] = _clip_unit(olo)
    rhi[0] = _clip_unit(ohi)


cdef inline void _dyn(double p, double v, double u, const Prm* r, bint gym,
                      double* pn_out, double* vn_out) nogil:
    cdef double vn = (v + r.power * u) + (-r.gravity) * cos(r.freq * p)
    cdef double pn
    if vn < r.vmin:
        vn = r.vmin
    elif vn > r.vmax:
        vn = r.vmax
    pn = p + (vn if gym else v)
    if pn <= r.pmin:
        pn = r.pmin
        if vn < 0.0:
            vn = 0.0
    elif pn > r.pmax:
        pn = r.pmax
    pn_out[0] = pn
    vn_out[0] = vn


cdef void _cos_bounds(double lo, double hi, bint outward, double* clo_out, double* chi_out) nogil:
    cdef double c1, c2, clo, chi, k
    if not (isfinite(lo) and isfinite(hi)) or hi - lo >= 2.0 * M_PI:
        clo_out[0] = -1.0
        chi_out[0] = 1.0
        return
    c1 = cos(lo)
    c2 = cos(hi)
    if c1 <= c2:
        clo = c1
        chi = c2
    else:
        clo = c2
        chi = c1
    k = ceil(lo / M_PI)
    while k * M_PI <= hi:
        if (<long>k) % 2 == 0:
            chi = 1.0
        else:
            clo = -1.0
        k += 1.0
    clo = _dn(clo, outward)
    chi = _up(chi, outward)
    clo_out[0] = clo if clo > -1.0 else -1.0
    chi_out[0] = chi if chi < 1.0 else 1.0


cdef void _dyn_interval(double pl, double ph, double vl, double vh, double ul, double uh,
                        const Prm* r, bint gym, bint outward, double* out) nogil:
    cdef double sul, suh, al, ah, fl, fh, cl, ch, ng, gl, gh, wl, wh, ql, qh
    sul = _dn(r.power * ul, outward)
    suh = _up(r.power * uh, outward)
    al = _dn(vl + sul, outward)
    ah = _up(vh + suh, outward)
    fl = _dn(r.freq * pl, outward)
    fh = _up(r.freq * ph, outward)
    _cos_bounds(fl, fh, outward, &cl, &ch)
    ng = -r.gravity
    gl = _dn(ng * ch, outward)
    gh = _up(ng * cl, outward)
    wl = _dn(al + gl, outward)
    wh = _up(ah + gh, outward)
    wl = _clamp(wl, r.vmin, r.vmax)
    wh = _clamp(wh, r.vmin, r.vmax)
    if gym:
        ql = _dn(pl + wl, outward)
        qh = _up(ph + wh, outward)
    else:
        ql = _dn(pl + vl, outward)
        qh = _up(ph + vh, outward)
    if ql <= r.pmin:
        if qh <= r.pmin:
            wl = wl if wl > 0.0 else 0.0
        wh = wh if wh > 0.0 else 0.0
    out[0] = _clamp(ql, r.pmin, r.pmax)
    out[1] = _clamp(qh, r.pmin, r.pmax)
    out[2] = wl
    out[3] = wh


# ---------------------------------------------------------------------------
# Python-visible API


def controller_eval(pack, double y, double v):
    cdef _PackView pv = _PackView(pack)
    return _ctrl_eval(&pv.c, y, v)


def controller_eval_interval(pack, double yl, double yh, double vl, double vh, bint outward=False):
    cdef _PackView pv = _PackView(pack)
    cdef double lo, hi
    _ctrl_interval(&pv.c, yl, yh, vl, vh, outward, &lo, &hi)
    return lo, hi


def dynamics_step(double p, double v, double u, tuple prm, bint gym):
    cdef Prm r = _prm(prm)
    cdef double pn, vn
    _dyn(p, v, u, &r, gym, &pn, &vn)
    return pn, vn


def dynamics_step_interval(double pl, double ph, double vl, double vh, double ul, double uh,
                           tuple prm, bint gym, bint outward=False):
    cdef Prm r = _prm(prm)
    cdef double out[4]
    _dyn_interval(pl, ph, vl, vh, ul, uh, &r, gym, outward, out)
    return out[0], out[1], out[2], out[3]


def closed_loop_box_step(double pl, double ph, double vl, double vh, double e,
                         pack, tuple prm, bint gym, bint outward=False):
    cdef _PackView pv = _PackView(pack)
    cdef Prm r = _prm(prm)
    cdef double out[4]
    cdef double yl, yh, ul, uh
    yl = _dn(pl + (-e), outward)
    yh = _up(ph + e, outward)
    _ctrl_interval(&pv.c, yl, yh, vl, vh, outward, &ul, &uh)
    _dyn_interval(pl, ph, vl, vh, ul, uh, &r, gym, outward, out)
    return out[0], out[1], out[2], out[3]


cdef inline double _amplitude(double p, const double* xs, const double* amps, long n) nogil:
    cdef long lo = 0, hi = n, mid
    if p <= xs[0]:
        return amps[0]
    if p >= xs[n - 1]:
        return amps[n - 1]
    # bisect_right - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if p < xs[mid]:
            hi = mid
        else:
            lo = mid + 1
    lo -= 1
    return amps[lo] + (amps[lo + 1] - amps[lo]) * ((p - xs[lo]) / (xs[lo + 1] - xs[lo]))


def noise_amplitude(double p, bp_x, bp_a):
    cdef const double[::1] xs = np.ascontiguousarray(bp_x, dtype=np.float64)
    cdef const double[::1] amps = np.ascontiguousarray(bp_a, dtype=np.float64)
    return _amplitude(p, &xs[0], &amps[0], xs.shape[0])


def rollout(double p0, double v0, zeta, bp_x, bp_a, pack, tuple prm, long horizon, bint gym):
    cdef _PackView pv = _PackView(pack)
    cdef Prm r = _prm(prm)
    cdef const double[::1] z = np.ascontiguousarray(zeta, dtype=np.float64)
    cdef const double[::1] xs = np.ascontiguousarray(bp_x, dtype=np.float64)
    cdef const double[::1] amps = np.ascontiguousarray(bp_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] P = np.empty(horizon + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] V = np.empty(horizon + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] Y = np.empty(horizon + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] U = np.empty(horizon + 1)
    cdef double p = p0, v = v0, y, u
    cdef long k, n = 0, nb = xs.shape[0]
    cdef bint terminated = False
    if z.shape[0] < horizon + 1:
        raise ValueError("noise sequence shorter than horizon + 1")
    for k in range(horizon + 1):
        y = p + _amplitude(p, &xs[0], &amps[0], nb) * z[k]
        u = _ctrl_eval(&pv.c, y, v)
        P[k] = p
        V[k] = v
        Y[k] = y
        U[k] = u
        n = k + 1
        if p >= r.goal:
            terminated = True
            break
        if k == horizon:
            break
        _dyn(p, v, u, &r, gym, &p, &v)
    return P[:n], V[:n], Y[:n], U[:n], terminated


def region_stats(pos, err, traj, tstep, edges, long n_traj, time_weights):
    cdef const double[::1] P = np.ascontiguousarray(pos, dtype=np.float64)
    cdef const double[::1] E = np.ascontiguousarray(err, dtype=np.float64)
    cdef const long[::1] J = np.ascontiguousarray(traj, dtype=np.int_)
    cdef const long[::1] T = np.ascontiguousarray(tstep, dtype=np.int_)
    cdef const double[::1] ed = np.ascontiguousarray(edges, dtype=np.float64)
    cdef const double[::1] tw = np.ascontiguousarray(time_weights, dtype=np.float64)
    cdef long m = ed.shape[0] + 1
    cdef long n = P.shape[0], idx, lo, hi, mid
    cdef double x
    maxerr_arr = np.full((m, n_traj), -1.0)
    counts_arr = np.zeros(m, dtype=np.int64)
    weighted_arr = np.zeros(m)
    cdef double[:, ::1] maxerr = maxerr_arr
    cdef long long[::1] counts = counts_arr
    cdef double[::1] weighted = weighted_arr
    with nogil:
        for idx in range(n):
            x = P[idx]
            lo = 0
            hi = m - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if x < ed[mid]:
                    hi = mid
                else:
                    lo = mid + 1
            counts[lo] += 1
            weighted[lo] += tw[T[idx]]
            if E[idx] > maxerr[lo, J[idx]]:
                maxerr[lo, J[idx]] = E[idx]
    return maxerr_arr, counts_arr, weighted_arr
