"""Pure-numpy photon walk, lockstep-vectorized over all photons.

Mirrors the compiled kernel decision for decision and consumes the same
per-photon counter streams, so the two backends agree statistically (and
exactly in scatter-free cases up to transcendental rounding).  Used when
numba is unavailable or OXIMAP_BACKEND=numpy.
"""

import numpy as np

from .rng import GOLDEN, mix64

_U1 = np.uint64(1)
_S11 = np.uint64(11)
_INV53 = 2.0 ** -53
_BIG = 1e30


def _draw(keys, ctr, sel):
    """One uniform per selected photon; bumps their counters in place."""
    with np.errstate(over="ignore"):
        h = mix64(keys[sel] + GOLDEN * (ctr[sel] + _U1))
    ctr[sel] += _U1
    return np.asarray(h >> _S11, np.float64) * _INV53


def _fresnel_vec(n_in, n_out, cos_i):
    cos_i = np.minimum(cos_i, 1.0)
    sin_t2 = (n_in / n_out) ** 2 * (1.0 - cos_i * cos_i)
    tir = sin_t2 >= 1.0
    cos_t = np.sqrt(np.maximum(0.0, 1.0 - sin_t2))
    rs = (n_in * cos_i - n_out * cos_t) / (n_in * cos_i + n_out * cos_t)
    rp = (n_in * cos_t - n_out * cos_i) / (n_in * cos_t + n_out * cos_i)
    return np.where(tir, 1.0, 0.5 * (rs * rs + rp * rp))


def _hg_cos_vec(g, u):
    iso = np.abs(g) < 1e-3
    gs = np.where(iso, 0.5, g)  # dummy to avoid divide-by-zero in the masked lane
    f = (1.0 - gs * gs) / (1.0 - gs + 2.0 * gs * u)
    aniso = (1.0 + gs * gs - f * f) / (2.0 * gs)
    return np.where(iso, 1.0 - 2.0 * u, aniso)


def _deposit_vec(z0, uz, s, w0, mua, h, nsl, phi):
    """Vector version of the per-slice geometric deposition.

    Returns the end-of-segment weights.  phi is modified in place.
    """
    live = s > 0.0
    wend = np.where(mua > 0.0, w0 * np.exp(-mua * np.maximum(s, 0.0)), w0)
    wend = np.where(live, wend, w0)
    if not live.any():
        return wend

    flat = live & (np.abs(uz) < 1e-12)
    if flat.any():
        k = np.clip((z0[flat] / h).astype(np.int64), 0, nsl - 1)
        c = np.where(
            mua[flat] > 0.0,
            (w0[flat] - wend[flat]) / np.where(mua[flat] > 0.0, mua[flat], 1.0),
            w0[flat] * s[flat],
        )
        np.add.at(phi, k, c)

    m = live & (np.abs(uz) >= 1e-12)
    if not m.any():
        return wend
    z0m, uzm, sm, w0m, muam = z0[m], uz[m], s[m], w0[m], mua[m]
    k0 = np.floor(z0m / h).astype(np.int64)
    edge_up = (uzm < 0.0) & (k0 * h == z0m)
    k0 = np.clip(k0 - edge_up.astype(np.int64), 0, nsl - 1)
    k1 = np.clip(np.floor((z0m + uzm * sm) / h).astype(np.int64), 0, nsl - 1)
    sgn = np.where(uzm > 0.0, 1, -1).astype(np.int64)
    counts = np.abs(k1 - k0) + 1

    total = int(counts.sum())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    kk = np.repeat(k0, counts) + np.repeat(sgn, counts) * within
    z0r = np.repeat(z0m, counts)
    uzr = np.repeat(uzm, counts)
    sr = np.repeat(sm, counts)
    w0r = np.repeat(w0m, counts)
    muar = np.repeat(muam, counts)

    t1 = (kk * h - z0r) / uzr
    t2 = ((kk + 1) * h - z0r) / uzr
    tlo = np.clip(np.minimum(t1, t2), 0.0, sr)
    thi = np.clip(np.maximum(t1, t2), 0.0, sr)
    absorbing = muar > 0.0
    safe_mua = np.where(absorbing, muar, 1.0)
    contrib = np.where(
        absorbing,
        w0r * (np.exp(-safe_mua * tlo) - np.exp(-safe_mua * thi)) / safe_mua,
        w0r * (thi - tlo),
    )
    np.add.at(phi, kk, contrib)
    return wend


def run_numpy(lam_key, n_photons, mua, mus, g, zb, n_tissue, rsp,
              lx, ly, h, thresh, survive, max_path, lateral_mode, nsl):
    """Simulate the full photon population; returns (phi, tallies)."""
    phi = np.zeros(nsl, np.float64)
    tal = np.zeros(6, np.float64)
    n_layers = mua.shape[0]
    n = int(n_photons)
    if n == 0:
        return phi, tal

    with np.errstate(over="ignore"):
        keys = mix64((np.uint64(lam_key) ^ np.arange(n, dtype=np.uint64)) + GOLDEN)
    ctr = np.zeros(n, np.uint64)
    tal[0] = rsp * n

    u1 = _draw(keys, ctr, slice(None))
    u2 = _draw(keys, ctr, slice(None))
    x = u1 * lx
    y = u2 * ly
    z = np.zeros(n)
    ux = np.zeros(n)
    uy = np.zeros(n)
    uz = np.ones(n)
    w = np.full(n, 1.0 - rsp)
    layer = np.zeros(n, np.int64)
    path = np.zeros(n)
    if rsp >= 1.0:
        return phi, tal
    idx = np.arange(n)

    inv_survive = 1.0 / survive
    while idx.size:
        li = layer[idx]
        mu_s = mus[li]
        mu_a = mua[li]
        step = np.full(idx.size, _BIG)
        sc = mu_s > 0.0
        if sc.any():
            us = _draw(keys, ctr, idx[sc])
            step[sc] = -np.log(1.0 - us) / mu_s[sc]

        uzi = uz[idx]
        zi = z[idx]
        down = uzi > 1e-12
        up = uzi < -1e-12
        bdist = np.full(idx.size, _BIG)
        bdist[down] = (zb[li[down] + 1] - zi[down]) / uzi[down]
        bdist[up] = (zb[li[up]] - zi[up]) / uzi[up]

        s = step.copy()
        ev = np.zeros(idx.size, np.int8)
        hit = bdist <= s
        s[hit] = bdist[hit]
        ev[hit] = 1
        remain = max_path - path[idx]
        trunc = remain <= s
        s[trunc] = remain[trunc]
        ev[trunc] = 2

        wb = w[idx]
        wn = _deposit_vec(zi, uzi, s, wb, mu_a, h, nsl, phi)
        tal[3] += (wb - wn).sum()
        w[idx] = wn

        x[idx] += ux[idx] * s
        y[idx] += uy[idx] * s
        z[idx] += uzi * s
        path[idx] += s
        if lateral_mode == 0:
            x[idx] %= lx
            y[idx] %= ly
        else:
            px = x[idx] % (2.0 * lx)
            fold = px > lx
            px[fold] = 2.0 * lx - px[fold]
            x[idx] = px
            ux[idx] = np.where(fold, -ux[idx], ux[idx])
            py = y[idx] % (2.0 * ly)
            fold = py > ly
            py[fold] = 2.0 * ly - py[fold]
            y[idx] = py
            uy[idx] = np.where(fold, -uy[idx], uy[idx])

        dead = np.zeros(idx.size, bool)

        t2m = ev == 2
        if t2m.any():
            tal[5] += w[idx[t2m]].sum()
            dead |= t2m

        bm = ev == 1
        if bm.any():
            bdown = bm & down
            if bdown.any():
                gi = idx[bdown]
                layer[gi] += 1
                exits = layer[gi] == n_layers
                if exits.any():
                    tal[2] += w[gi[exits]].sum()
                    dead |= _scatter_mask(bdown, exits)
                inside = ~exits
                if inside.any():
                    z[gi[inside]] = zb[layer[gi[inside]]]
            bup = bm & up
            if bup.any():
                gi = idx[bup]
                top = layer[gi] == 0
                if top.any():
                    ti = gi[top]
                    z[ti] = 0.0
                    refl = _fresnel_vec(n_tissue, 1.0, -uz[ti])
                    tal[1] += (w[ti] * (1.0 - refl)).sum()
                    w[ti] = w[ti] * refl
                    uz[ti] = -uz[ti]
                    sub = np.zeros(gi.size, bool)
                    sub[top] = w[ti] <= 0.0
                    gone = np.zeros(idx.size, bool)
                    gone[np.nonzero(bup)[0]] = sub
                    dead |= gone
                interior = ~top
                if interior.any():
                    ii = gi[interior]
                    layer[ii] -= 1
                    z[ii] = zb[layer[ii] + 1]

        sm = ev == 0
        if sm.any():
            si = idx[sm]
            ua = _draw(keys, ctr, si)
            ub = _draw(keys, ctr, si)
            cost = _hg_cos_vec(g[layer[si]], ua)
            sint = np.sqrt(np.maximum(0.0, 1.0 - cost * cost))
            az = 2.0 * np.pi * ub
            cosp = np.cos(az)
            sinp = np.sin(az)
            ouz = uz[si]
            oux = ux[si]
            ouy = uy[si]
            vertical = np.abs(ouz) > 0.99999
            den = np.sqrt(np.maximum(1e-300, 1.0 - ouz * ouz))
            nux = sint * (oux * ouz * cosp - ouy * sinp) / den + oux * cost
            nuy = sint * (ouy * ouz * cosp + oux * sinp) / den + ouy * cost
            nuz = -den * sint * cosp + ouz * cost
            ux[si] = np.where(vertical, sint * cosp, nux)
            uy[si] = np.where(vertical, sint * sinp, nuy)
            uz[si] = np.where(vertical, np.where(ouz > 0.0, cost, -cost), nuz)

        rl = ~dead & (w[idx] < thresh)
        if rl.any():
            ri = idx[rl]
            ur = _draw(keys, ctr, ri)
            surv = ur < inv_survive
            died = ~surv
            tal[4] += (w[ri[surv]] - w[ri[surv]] * survive).sum()
            tal[4] += w[ri[died]].sum()
            w[ri[surv]] *= survive
            gone = np.zeros(idx.size, bool)
            gone[np.nonzero(rl)[0]] = died
            dead |= gone

        idx = idx[~dead]

    return phi, tal


def _scatter_mask(outer, inner):
    """Expand a mask over a masked subset back to the outer mask's frame."""
    out = np.zeros(outer.size, bool)
    out[np.nonzero(outer)[0]] = inner
    return out
