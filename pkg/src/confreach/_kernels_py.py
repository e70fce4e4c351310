"""Pure-Python implementation of the hot kernels.

Mirrors ``_kernels.pyx`` operation for operation so that both backends give
bitwise-identical results.  Every interval routine evaluates its endpoints
with the same float operations, in the same order, as the scalar routine
it encloses; with round-to-nearest this makes point boxes reproduce the
scalar path exactly.
"""
from __future__ import annotations

import math
from bisect import bisect_right

import numpy as np

ACT_ID, ACT_SIGMOID, ACT_TANH, ACT_RELU = 0, 1, 2, 3
KIND_MLP, KIND_ENERGY = 0, 1

_INF = math.inf


def _dn(x, outward):
    return math.nextafter(x, -_INF) if outward else x


def _up(x, outward):
    return math.nextafter(x, _INF) if outward else x


def _sigmoid(x):
    try:
        return 1.0 / (1.0 + math.exp(-x))
    except OverflowError:
        return 0.0


def _act(code, x):
    if code == ACT_SIGMOID:
        return _sigmoid(x)
    if code == ACT_TANH:
        return math.tanh(x)
    if code == ACT_RELU:
        return x if x > 0.0 else 0.0
    return x


def _act_bounds(code, lo, hi, outward):
    lo, hi = _act(code, lo), _act(code, hi)
    if outward and code != ACT_RELU:
        lo, hi = math.nextafter(lo, -_INF), math.nextafter(hi, _INF)
        if code == ACT_SIGMOID:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
        elif code == ACT_TANH:
            lo, hi = max(lo, -1.0), min(hi, 1.0)
    return lo, hi


def _clip_unit(x):
    if x < -1.0:
        return -1.0
    if x > 1.0:
        return 1.0
    return x


def controller_eval(pack, y, v):
    kind, dims, acts, theta, scale, shift, thrust = pack
    if kind == KIND_ENERGY:
        return thrust if v >= 0.0 else -thrust
    x = [y, v]
    off = 0
    for layer in range(len(acts)):
        nin, nout = dims[layer], dims[layer + 1]
        bo = off + nin * nout
        code = acts[layer]
        out = []
        for j in range(nout):
            acc = theta[bo + j]
            row = off + j * nin
            for i in range(nin):
                acc = acc + theta[row + i] * x[i]
            out.append(_act(code, acc))
        x = out
        off = bo + nout
    return _clip_unit(scale * x[0] + shift)


def controller_eval_interval(pack, yl, yh, vl, vh, outward=False):
    kind, dims, acts, theta, scale, shift, thrust = pack
    if kind == KIND_ENERGY:
        if vl >= 0.0:
            return thrust, thrust
        if vh < 0.0:
            return -thrust, -thrust
        return -thrust, thrust
    lo = [yl, vl]
    hi = [yh, vh]
    off = 0
    for layer in range(len(acts)):
        nin, nout = dims[layer], dims[layer + 1]
        bo = off + nin * nout
        code = acts[layer]
        nlo, nhi = [], []
        for j in range(nout):
            alo = ahi = theta[bo + j]
            row = off + j * nin
            for i in range(nin):
                w = theta[row + i]
                if w >= 0.0:
                    tlo, thi = w * lo[i], w * hi[i]
                else:
                    tlo, thi = w * hi[i], w * lo[i]
                alo = _dn(alo + _dn(tlo, outward), outward)
                ahi = _up(ahi + _up(thi, outward), outward)
            a, b = _act_bounds(code, alo, ahi, outward)
            nlo.append(a)
            nhi.append(b)
        lo, hi = nlo, nhi
        off = bo + nout
    if scale >= 0.0:
        olo, ohi = scale * lo[0], scale * hi[0]
    else:
        olo, ohi = scale * hi[0], scale * lo[0]
    olo = _dn(_dn(olo, outward) + shift, outward)
    ohi = _up(_up(ohi, outward) + shift, outward)
    return _clip_unit(olo), _clip_unit(ohi)


def dynamics_step(p, v, u, prm, gym):
    power, gravity, freq, goal, pmin, pmax, vmin, vmax = prm
    vn = (v + power * u) + (-gravity) * math.cos(freq * p)
    if vn < vmin:
        vn = vmin
    elif vn > vmax:
        vn = vmax
    pn = p + (vn if gym else v)
    if pn <= pmin:
        pn = pmin
        if vn < 0.0:
            vn = 0.0
    elif pn > pmax:
        pn = pmax
    return pn, vn


def _cos_bounds(lo, hi, outward):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi - lo >= 2.0 * math.pi:
        return -1.0, 1.0
    c1, c2 = math.cos(lo), math.cos(hi)
    clo, chi = (c1, c2) if c1 <= c2 else (c2, c1)
    k = math.ceil(lo / math.pi)
    while k * math.pi <= hi:
        if k % 2 == 0:
            chi = 1.0
        else:
            clo = -1.0
        k += 1
    return max(-1.0, _dn(clo, outward)), min(1.0, _up(chi, outward))


def _clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def dynamics_step_interval(pl, ph, vl, vh, ul, uh, prm, gym, outward=False):
    power, gravity, freq, goal, pmin, pmax, vmin, vmax = prm
    sul, suh = _dn(power * ul, outward), _up(power * uh, outward)
    al, ah = _dn(vl + sul, outward), _up(vh + suh, outward)
    fl_, fh = _dn(freq * pl, outward), _up(freq * ph, outward)
    cl, ch = _cos_bounds(fl_, fh, outward)
    ng = -gravity
    gl, gh = _dn(ng * ch, outward), _up(ng * cl, outward)
    wl, wh = _dn(al + gl, outward), _up(ah + gh, outward)
    wl, wh = _clamp(wl, vmin, vmax), _clamp(wh, vmin, vmax)
    if gym:
        ql, qh = _dn(pl + wl, outward), _up(ph + wh, outward)
    else:
        ql, qh = _dn(pl + vl, outward), _up(ph + vh, outward)
    if ql <= pmin:
        if qh <= pmin:
            wl = wl if wl > 0.0 else 0.0
        wh = wh if wh > 0.0 else 0.0
    ql, qh = _clamp(ql, pmin, pmax), _clamp(qh, pmin, pmax)
    return ql, qh, wl, wh


def closed_loop_box_step(pl, ph, vl, vh, e, pack, prm, gym, outward=False):
    """One closed-loop step of a box with measurement noise in ``[-e, e]``."""
    yl, yh = _dn(pl + (-e), outward), _up(ph + e, outward)
    ul, uh = controller_eval_interval(pack, yl, yh, vl, vh, outward)
    return dynamics_step_interval(pl, ph, vl, vh, ul, uh, prm, gym, outward)


def noise_amplitude(p, bp_x, bp_a):
    n = len(bp_x)
    if p <= bp_x[0]:
        return bp_a[0]
    if p >= bp_x[n - 1]:
        return bp_a[n - 1]
    i = bisect_right(bp_x, p) - 1
    return bp_a[i] + (bp_a[i + 1] - bp_a[i]) * ((p - bp_x[i]) / (bp_x[i + 1] - bp_x[i]))


def rollout(p0, v0, zeta, bp_x, bp_a, pack, prm, horizon, gym):
    goal = prm[3]
    bp_x = [float(x) for x in bp_x]
    bp_a = [float(a) for a in bp_a]
    P = np.empty(horizon + 1)
    V = np.empty(horizon + 1)
    Y = np.empty(horizon + 1)
    U = np.empty(horizon + 1)
    p, v = float(p0), float(v0)
    n = 0
    terminated = False
    for k in range(horizon + 1):
        y = p + noise_amplitude(p, bp_x, bp_a) * float(zeta[k])
        u = controller_eval(pack, y, v)
        P[k], V[k], Y[k], U[k] = p, v, y, u
        n = k + 1
        if p >= goal:
            terminated = True
            break
        if k == horizon:
            break
        p, v = dynamics_step(p, v, u, prm, gym)
    return P[:n], V[:n], Y[:n], U[:n], terminated


def region_stats(pos, err, traj, tstep, edges, n_traj, time_weights):
    """Per-region visit statistics for a partition of the position axis.

    Returns ``(maxerr, counts, weighted)``: ``maxerr[i, j]`` is the largest
    error of trajectory ``j`` inside region ``i`` (-1 if never visited),
    ``counts[i]`` the number of visits and ``weighted[i]`` the sum of
    ``time_weights[t]`` over visits.
    """
    edges = np.asarray(edges, dtype=np.float64)
    m = len(edges) + 1
    region = np.searchsorted(edges, pos, side="right")
    counts = np.bincount(region, minlength=m).astype(np.int64)
    weighted = np.bincount(region, weights=np.asarray(time_weights)[tstep], minlength=m)
    maxerr = np.full((m, n_traj), -1.0)
    np.maximum.at(maxerr, (region, traj), err)
    return maxerr, counts, weighted
