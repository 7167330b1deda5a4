"""Compiled photon-walk kernels.

One photon is one independent stream of the counter hash in rng.py, so a
trajectory depends only on (stream key, photon index), never on batch or
thread scheduling.  Results are accumulated into per-batch partial arrays
which the caller reduces in fixed order; runs with different thread counts
are therefore bit-identical.

Tally slots: 0 specular, 1 diffuse reflectance, 2 transmitted, 3 absorbed,
4 roulette net (signed), 5 terminated at the path-length cap.
"""

import math

import numpy as np

from ._accel import njit, prange

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX_A = np.uint64(0xBF58476D1CE4E5B9)
MIX_B = np.uint64(0x94D049BB133111EB)
S30 = np.uint64(30)
S27 = np.uint64(27)
S31 = np.uint64(31)
S11 = np.uint64(11)
U1 = np.uint64(1)
INV53 = 2.0 ** -53

BATCH = 4096  # photons per partial accumulator; fixed so results never depend on threads


@njit(cache=True, nogil=True)
def _mix64(z):
    z = (z ^ (z >> S30)) * MIX_A
    z = (z ^ (z >> S27)) * MIX_B
    return z ^ (z >> S31)


@njit(cache=True, nogil=True)
def _u01(key, ctr):
    h = _mix64(key + GOLDEN * (ctr + U1))
    return (h >> S11) * INV53


@njit(cache=True, nogil=True)
def _hg_cos(g, u):
    # Henyey-Greenstein inverse CDF; isotropic fallback for tiny |g|
    if abs(g) < 1e-3:
        return 1.0 - 2.0 * u
    f = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    return (1.0 + g * g - f * f) / (2.0 * g)


@njit(cache=True, nogil=True)
def _fresnel(n_in, n_out, cos_i):
    """Unpolarized reflectance; cos_i is the incidence cosine (> 0)."""
    if n_in == n_out:
        return 0.0
    if cos_i > 1.0:
        cos_i = 1.0
    sin_t2 = (n_in / n_out) ** 2 * (1.0 - cos_i * cos_i)
    if sin_t2 >= 1.0:
        return 1.0
    cos_t = math.sqrt(1.0 - sin_t2)
    rs = (n_in * cos_i - n_out * cos_t) / (n_in * cos_i + n_out * cos_t)
    rp = (n_in * cos_t - n_out * cos_i) / (n_in * cos_t + n_out * cos_i)
    return 0.5 * (rs * rs + rp * rp)


@njit(cache=True, nogil=True, fastmath=True)
def _deposit(z0, uz, s, w0, mua, h, phi):
    """Drop path-length-weighted energy into depth slices along one segment.

    Attenuates continuously: the weight entering a slice decays by
    exp(-mua * dl) across it, and (w_in - w_out)/mua is the slice fluence
    contribution.  Returns the weight at the end of the segment.
    """
    nsl = phi.shape[0]
    if s <= 0.0:
        return w0
    if -1e-12 < uz < 1e-12:
        k = int(z0 / h)
        if k < 0:
            k = 0
        elif k >= nsl:
            k = nsl - 1
        if mua > 0.0:
            wend = w0 * math.exp(-mua * s)
            phi[k] += (w0 - wend) / mua
            return wend
        phi[k] += w0 * s
        return w0
    k = int(z0 / h)
    if uz < 0.0 and k * h == z0:
        k -= 1  # sitting exactly on a slice edge, heading up
    if k < 0:
        k = 0
    elif k >= nsl:
        k = nsl - 1
    inv = 1.0 / uz
    if uz > 0.0:
        t_edge = ((k + 1) * h - z0) * inv
        kstep = 1
    else:
        t_edge = (k * h - z0) * inv
        kstep = -1
    if t_edge < 0.0:
        t_edge = 0.0
    elif t_edge > s:
        t_edge = s
    w = w0
    if mua > 0.0:
        wn = w * math.exp(-mua * t_edge)
        phi[k] += (w - wn) / mua
        w = wn
    else:
        phi[k] += w * t_edge
    rem = s - t_edge
    full = h * abs(inv)
    fatt = math.exp(-mua * full) if mua > 0.0 else 1.0
    k += kstep
    while rem > full and 0 <= k < nsl:
        if mua > 0.0:
            wn = w * fatt
            phi[k] += (w - wn) / mua
            w = wn
        else:
            phi[k] += w * full
        rem -= full
        k += kstep
    if rem > 0.0:
        if mua > 0.0:
            wn = w * math.exp(-mua * rem)
            if 0 <= k < nsl:
                phi[k] += (w - wn) / mua
            w = wn
        elif 0 <= k < nsl:
            phi[k] += w * rem
    return w


@njit(cache=True, nogil=True, fastmath=True)
def _run_range(lam_key, i0, i1, mua, mus, g, zb, n_tissue, rsp,
               lx, ly, h, thresh, survive, max_path, lateral_mode,
               phi, tal):
    """Walk photons [i0, i1) of one wavelength stream into phi/tal."""
    n_layers = mua.shape[0]
    tal[0] += rsp * (i1 - i0)
    inv_survive = 1.0 / survive
    for i in range(i0, i1):
        pk = _mix64((lam_key ^ np.uint64(i)) + GOLDEN)
        ctr = np.uint64(0)
        u1 = _u01(pk, ctr)
        ctr += U1
        u2 = _u01(pk, ctr)
        ctr += U1
        x = u1 * lx
        y = u2 * ly
        z = 0.0
        ux = 0.0
        uy = 0.0
        uz = 1.0
        w = 1.0 - rsp
        layer = 0
        path = 0.0
        alive = w > 0.0
        while alive:
            mu_s = mus[layer]
            mu_a = mua[layer]
            if mu_s > 0.0:
                u = _u01(pk, ctr)
                ctr += U1
                step = -math.log(1.0 - u) / mu_s
            else:
                step = 1e30
            if uz > 1e-12:
                bdist = (zb[layer + 1] - z) / uz
                bdir = 1
            elif uz < -1e-12:
                bdist = (zb[layer] - z) / uz
                bdir = -1
            else:
                bdist = 1e30
                bdir = 0
            s = step
            event = 0  # scatter
            if bdist <= s:
                s = bdist
                event = 1  # layer boundary
            if max_path - path <= s:
                s = max_path - path
                event = 2  # truncated
            wn = _deposit(z, uz, s, w, mu_a, h, phi)
            tal[3] += w - wn
            w = wn
            x += ux * s
            y += uy * s
            z += uz * s
            path += s
            if lateral_mode == 0:
                x = x % lx
                y = y % ly
            else:
                px = x % (2.0 * lx)
                if px > lx:
                    px = 2.0 * lx - px
                    ux = -ux
                x = px
                py = y % (2.0 * ly)
                if py > ly:
                    py = 2.0 * ly - py
                    uy = -uy
                y = py
            if event == 2:
                tal[5] += w
                break
            if event == 1:
                if bdir > 0:
                    layer += 1
                    if layer == n_layers:
                        tal[2] += w
                        break
                    z = zb[layer]
                else:
                    if layer == 0:
                        z = 0.0
                        refl = _fresnel(n_tissue, 1.0, -uz)
                        tal[1] += w * (1.0 - refl)
                        w = w * refl
                        uz = -uz
                        if w <= 0.0:
                            break
                    else:
                        layer -= 1
                        z = zb[layer + 1]
            else:
                ua = _u01(pk, ctr)
                ctr += U1
                ub = _u01(pk, ctr)
                ctr += U1
                cost = _hg_cos(g[layer], ua)
                sint = math.sqrt(max(0.0, 1.0 - cost * cost))
                phi_az = 2.0 * math.pi * ub
                cosp = math.cos(phi_az)
                sinp = math.sin(phi_az)
                if abs(uz) > 0.99999:
                    ux = sint * cosp
                    uy = sint * sinp
                    uz = cost if uz > 0.0 else -cost
                else:
                    den = math.sqrt(1.0 - uz * uz)
                    nux = sint * (ux * uz * cosp - uy * sinp) / den + ux * cost
                    nuy = sint * (uy * uz * cosp + ux * sinp) / den + uy * cost
                    nuz = -den * sint * cosp + uz * cost
                    ux = nux
                    uy = nuy
                    uz = nuz
            if w < thresh:
                ur = _u01(pk, ctr)
                ctr += U1
                if ur < inv_survive:
                    tal[4] += w - w * survive
                    w = w * survive
                else:
                    tal[4] += w
                    break


@njit(cache=True, nogil=True)
def _run_lambda(lam_key, n_photons, mua, mus, g, zb, n_tissue, rsp,
                lx, ly, h, thresh, survive, max_path, lateral_mode,
                phi_row, tal_row):
    """One wavelength, accumulated batch by batch in fixed order.

    The batch-partial-then-sequential-sum reduction is shared with the
    single-wavelength driver so every entry point produces identical bits.
    """
    nb = (n_photons + BATCH - 1) // BATCH
    tmp_phi = np.zeros(phi_row.shape[0])
    tmp_tal = np.zeros(6)
    for b in range(nb):
        tmp_phi[:] = 0.0
        tmp_tal[:] = 0.0
        i0 = b * BATCH
        i1 = min(i0 + BATCH, n_photons)
        _run_range(lam_key, i0, i1, mua, mus, g, zb, n_tissue, rsp,
                   lx, ly, h, thresh, survive, max_path, lateral_mode,
                   tmp_phi, tmp_tal)
        phi_row += tmp_phi
        tal_row += tmp_tal


@njit(cache=True, nogil=True)
def run_spectrum_serial(lam_keys, n_photons, mua, mus, g, zb, n_tissue, rsp,
                        lx, ly, h, thresh, survive, max_path, lateral_mode,
                        phi_out, tal_out):
    """All wavelengths of one tissue in a single call; rows are per-wavelength."""
    for j in range(lam_keys.shape[0]):
        _run_lambda(lam_keys[j], n_photons, mua[j], mus[j], g, zb,
                    n_tissue, rsp, lx, ly, h, thresh, survive, max_path,
                    lateral_mode, phi_out[j], tal_out[j])


@njit(cache=True, parallel=True)
def run_spectrum_parallel(lam_keys, n_photons, mua, mus, g, zb, n_tissue, rsp,
                          lx, ly, h, thresh, survive, max_path, lateral_mode,
                          phi_out, tal_out):
    for j in prange(lam_keys.shape[0]):
        _run_lambda(lam_keys[j], n_photons, mua[j], mus[j], g, zb,
                    n_tissue, rsp, lx, ly, h, thresh, survive, max_path,
                    lateral_mode, phi_out[j], tal_out[j])


@njit(cache=True, nogil=True)
def run_serial(lam_key, n_photons, mua, mus, g, zb, n_tissue, rsp,
               lx, ly, h, thresh, survive, max_path, lateral_mode,
               phi_parts, tal_parts):
    nb = phi_parts.shape[0]
    for b in range(nb):
        i0 = b * BATCH
        i1 = min(i0 + BATCH, n_photons)
        _run_range(lam_key, i0, i1, mua, mus, g, zb, n_tissue, rsp,
                   lx, ly, h, thresh, survive, max_path, lateral_mode,
                   phi_parts[b], tal_parts[b])


@njit(cache=True, parallel=True)
def run_parallel(lam_key, n_photons, mua, mus, g, zb, n_tissue, rsp,
                 lx, ly, h, thresh, survive, max_path, lateral_mode,
                 phi_parts, tal_parts):
    nb = phi_parts.shape[0]
    for b in prange(nb):
        i0 = b * BATCH
        i1 = min(i0 + BATCH, n_photons)
        _run_range(lam_key, i0, i1, mua, mus, g, zb, n_tissue, rsp,
                   lx, ly, h, thresh, survive, max_path, lateral_mode,
                   phi_parts[b], tal_parts[b])
