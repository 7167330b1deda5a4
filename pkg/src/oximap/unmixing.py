"""Beer-Lambert linear unmixing: per-pixel oxygen saturation by least squares.

Each pixel spectrum is corrected, converted to absorbance, and decomposed over
four endmembers: band-effective extinction of oxy- and deoxyhemoglobin, a
constant offset, and a linear-in-band slope that absorbs the scattering
baseline. Chromophore concentrations are constrained non-negative; offset and
slope are free. Saturation is the oxyhemoglobin fraction of total hemoglobin.
The whole module is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._accel import njit, prange, resolve_backend
from .errors import AbsorbanceError, DataFormatError, ShapeError
from .optics import ExtinctionTable
from .spectral import BandSpectrum, CameraModel, adapt_to_camera

ACTIVE_TOL = 1e-10
DEGENERATE_TOL = 1e-12

_CSV_HEADER = ["band", "eps_hbo2", "eps_hb", "offset", "slope"]


@dataclass(frozen=True)
class EndmemberMatrix:
    """Columns: eps_hbo2, eps_hb, constant offset, centered band slope."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != 4 or m.shape[0] < 4:
            raise ShapeError(f"endmember matrix must be (bands >= 4, 4), got {m.shape}")
        if not np.isfinite(m).all():
            raise ShapeError("endmember matrix contains non-finite values")
        if np.linalg.matrix_rank(m) != 4:
            raise ShapeError("endmember matrix is rank deficient")
        object.__setattr__(self, "matrix", m)

    @property
    def bands(self) -> int:
        return self.matrix.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for b, row in enumerate(self.matrix):
                writer.writerow([b] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "EndmemberMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != _CSV_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(_CSV_HEADER)}")
        try:
            values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}: malformed endmember row: {exc}") from None
        return cls(matrix=values)


def build_endmembers(camera: CameraModel, table: ExtinctionTable | None = None
                     ) -> EndmemberMatrix:
    """Derive the endmember matrix for a camera from the extinction table.

    The extinction curves go through the same band integration as reflectance
    spectra, so each chromophore column is the camera's view of that absorber.
    The slope column is centered so it is orthogonal to the offset column.
    """
    if table is None:
        table = ExtinctionTable.bundled()
    eps_hbo2, eps_hb = table.lookup(camera.wavelengths)
    col_hbo2 = adapt_to_camera(eps_hbo2, camera).values
    col_hb = adapt_to_camera(eps_hb, camera).values
    nb = col_hbo2.size
    slope = (np.arange(nb) - (nb - 1) / 2.0) / max(nb - 1, 1)
    return EndmemberMatrix(matrix=np.column_stack(
        [col_hbo2, col_hb, np.ones(nb), slope]))


def _solve_pinned(gram, rhs, pinned):
    """Least-squares coefficients with the given chromophores pinned to zero."""
    free = [i for i in range(4) if i not in pinned]
    x = np.zeros(4)
    sub = np.linalg.solve(gram[np.ix_(free, free)], rhs[free])
    x[free] = sub
    return x


def _nnls_rows(em: np.ndarray, absorb: np.ndarray) -> np.ndarray:
    """Vectorized non-negative solve over rows of absorbance (numpy path).

    Tries the four chromophore active sets in a fixed order and keeps, per
    row, the first KKT-feasible candidate: free chromophores non-negative and
    pinned ones with non-negative gradient.
    """
    gram = em.T @ em
    rhs = absorb @ em  # (n, 4)
    n = absorb.shape[0]
    out = np.zeros((n, 4))
    decided = np.zeros(n, dtype=bool)
    scale = float(np.abs(gram).max())
    for pinned in ((), (0,), (1,), (0, 1)):
        free = [i for i in range(4) if i not in pinned]
        solve = np.linalg.solve(gram[np.ix_(free, free)],
                                rhs[:, free].T).T  # (n, len(free))
        cand = np.zeros((n, 4))
        cand[:, free] = solve
        ok = ~decided
        for i in (0, 1):
            if i in free:
                ok &= cand[:, i] >= -ACTIVE_TOL
        if pinned:
            grad = cand @ gram - rhs  # zero on free coords by construction
            for i in pinned:
                ok &= grad[:, i] >= -ACTIVE_TOL * scale
        out[ok] = cand[ok]
        decided |= ok
        if decided.all():
            break
    # numerical ties can leave a row undecided; fall back to the fully pinned fit
    if not decided.all():
        rest = ~decided
        out[rest] = 0.0
        out[np.ix_(rest, [2, 3])] = np.linalg.solve(
            gram[2:, 2:], rhs[rest][:, 2:].T).T
    np.maximum(out[:, 0], 0.0, out=out[:, 0])
    np.maximum(out[:, 1], 0.0, out=out[:, 1])
    return out


@njit(cache=True, nogil=True)
def _solve_sym(g, b):
    # Gaussian elimination with partial pivoting on a small copy
    n = b.size
    a = np.empty((n, n + 1))
    a[:, :n] = g
    a[:, n] = b
    for col in range(n):
        piv = col
        for r in range(col + 1, n):
            if abs(a[r, col]) > abs(a[piv, col]):
                piv = r
        if piv != col:
            for c in range(col, n + 1):
                a[piv, c], a[col, c] = a[col, c], a[piv, c]
        d = a[col, col]
        for r in range(col + 1, n):
            f = a[r, col] / d
            for c in range(col, n + 1):
                a[r, c] -= f * a[col, c]
    x = np.zeros(n)
    for r in range(n - 1, -1, -1):
        s = a[r, n]
        for c in range(r + 1, n):
            s -= a[r, c] * x[c]
        x[r] = s / a[r, r]
    return x


@njit(cache=True, nogil=True)
def _unmix_pixel(em, spectrum, out):
    """Fill out[0:2] with so2 and a degenerate marker for one pixel."""
    nb, _ = em.shape
    absorb = np.empty(nb)
    for b in range(nb):
        v = spectrum[b]
        if v <= 0.0:
            out[0] = 0.5
            out[1] = 1.0
            return
        absorb[b] = -np.log(v)
    gram = np.zeros((4, 4))
    rhs = np.zeros(4)
    for b in range(nb):
        for i in range(4):
            e = em[b, i]
            rhs[i] += e * absorb[b]
            for j in range(i, 4):
                gram[i, j] += e * em[b, j]
    for i in range(1, 4):
        for j in range(i):
            gram[i, j] = gram[j, i]
    scale = np.abs(gram).max()
    best = np.zeros(4)
    for mask in range(4):  # bit 0 pins chromophore 0, bit 1 pins chromophore 1
        pin0 = mask & 1 == 1
        pin1 = mask & 2 == 2
        n_free = 4 - int(pin0) - int(pin1)
        free = np.empty(n_free, dtype=np.int64)
        k = 0
        for i in range(4):
            if (i == 0 and pin0) or (i == 1 and pin1):
                continue
            free[k] = i
            k += 1
        sub_g = np.empty((n_free, n_free))
        sub_b = np.empty(n_free)
        for i in range(n_free):
            sub_b[i] = rhs[free[i]]
            for j in range(n_free):
                sub_g[i, j] = gram[free[i], free[j]]
        sol = _solve_sym(sub_g, sub_b)
        x = np.zeros(4)
        for i in range(n_free):
            x[free[i]] = sol[i]
        ok = True
        if not pin0 and x[0] < -ACTIVE_TOL:
            ok = False
        if not pin1 and x[1] < -ACTIVE_TOL:
            ok = False
        if ok and (pin0 or pin1):
            for i in range(2):
                if (i == 0 and pin0) or (i == 1 and pin1):
                    g = -rhs[i]
                    for j in range(4):
                        g += gram[i, j] * x[j]
                    if g < -ACTIVE_TOL * scale:
                        ok = False
                        break
        if ok:
            best = x
            break
    c1 = best[0] if best[0] > 0.0 else 0.0
    c2 = best[1] if best[1] > 0.0 else 0.0
    tot = c1 + c2
    if tot <= DEGENERATE_TOL:
        out[0] = 0.5
        out[1] = 1.0
    else:
        out[0] = c1 / tot
        out[1] = 0.0


@njit(cache=True, nogil=True, parallel=True)
def _unmix_frame(em, flat, so2, flags):
    for p in prange(flat.shape[0]):
        res = np.empty(2)
        _unmix_pixel(em, flat[p], res)
        so2[p] = res[0]
        flags[p] = res[1] > 0.5


def _apply_correction(values, correction):
    if correction is None:
        return values
    corr = np.asarray(correction, dtype=np.float64)
    nb = values.shape[-1]
    if corr.shape != (nb, nb):
        raise ShapeError(f"correction matrix must be ({nb}, {nb}), got {corr.shape}")
    return values @ corr.T


def unmix_so2(spectrum, em: EndmemberMatrix, correction=None):
    """Oxygen saturation of one band spectrum; returns (so2, degenerate).

    Raises when the corrected spectrum is not strictly positive, since the
    absorbance log is undefined there. The degenerate flag marks spectra whose
    fitted hemoglobin content is ~0 (so2 then defaults to 0.5).
    """
    values = spectrum.values if isinstance(spectrum, BandSpectrum) else spectrum
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size != em.bands:
        raise ShapeError(f"expected {em.bands} band values, got shape {values.shape}")
    values = _apply_correction(values, correction)
    if (values <= 0).any():
        raise AbsorbanceError("non-positive reflectance has no absorbance")
    coeff = _nnls_rows(em.matrix, -np.log(values)[None, :])[0]
    tot = coeff[0] + coeff[1]
    if tot <= DEGENERATE_TOL:
        return 0.5, True
    return float(coeff[0] / tot), False


def unmix_map(hypercube, em: EndmemberMatrix, correction=None, backend=None):
    """Per-pixel saturation map of an (H, W, bands) stack.

    Pixel-level absorbance failures (non-positive values) are recorded in the
    returned degenerate mask rather than raised; those pixels report 0.5.
    Returns (so2 map float64 H×W, degenerate mask bool H×W).
    """
    cube = np.asarray(hypercube, dtype=np.float64)
    if cube.ndim != 3 or cube.shape[2] != em.bands:
        raise ShapeError(f"expected (h, w, {em.bands}) stack, got {cube.shape}")
    h, w, nb = cube.shape
    flat = np.ascontiguousarray(cube.reshape(-1, nb))
    flat = _apply_correction(flat, correction)
    if resolve_backend(backend) == "numba":
        so2 = np.empty(h * w)
        flags = np.empty(h * w, dtype=np.bool_)
        _unmix_frame(em.matrix, flat, so2, flags)
        return so2.reshape(h, w), flags.reshape(h, w)
    bad = (flat <= 0).any(axis=1)
    so2 = np.full(h * w, 0.5)
    flags = bad.copy()
    good = ~bad
    if good.any():
        coeff = _nnls_rows(em.matrix, -np.log(flat[good]))
        tot = coeff[:, 0] + coeff[:, 1]
        degen = tot <= DEGENERATE_TOL
        vals = np.full(good.sum(), 0.5)
        np.divide(coeff[:, 0], tot, out=vals, where=~degen)
        so2[good] = vals
        flags[good] = degen
    return so2.reshape(h, w), flags.reshape(h, w)


def prewarm(bands: int = 16):
    """Compile the pixel kernel on a tiny frame."""
    t = np.linspace(0.0, np.pi, bands)
    em = EndmemberMatrix(matrix=np.column_stack(
        [np.cos(t) + 1.5, np.sin(t) + 1.5, np.ones(bands), t - t.mean()]))
    unmix_map(np.full((1, 1, bands), 0.5), em)
