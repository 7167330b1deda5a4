"""Linear unmixing: endmember construction and saturation recovery."""

import numpy as np
import pytest

from oximap.errors import AbsorbanceError, DataFormatError, ShapeError
from oximap.optics import ExtinctionTable
from oximap.rng import substream
from oximap.spectral import BandSpectrum
from oximap.unmixing import EndmemberMatrix, build_endmembers, unmix_map, unmix_so2

# thin-absorber scale: keeps synthetic absorbances O(0.1) for 1e4-1e5 extinctions
K = 3e-5


@pytest.fixture(scope="module")
def endmembers(camera):
    return build_endmembers(camera)


def _forward(em, so2, offset=0.1, slope=0.05):
    coeff = np.array([so2 * K, (1.0 - so2) * K, offset, slope])
    return np.exp(-em.matrix @ coeff)


def test_endmember_columns(camera, endmembers):
    m = endmembers.matrix
    assert m.shape == (16, 4)
    np.testing.assert_array_equal(m[:, 2], np.ones(16))
    assert m[:, 3].sum() == pytest.approx(0.0, abs=1e-12)
    assert m[:, 3] @ m[:, 2] == pytest.approx(0.0, abs=1e-12)  # orthogonal pair
    assert (m[:, :2] > 0).all()

    # chromophore columns are the band integrals of the extinction curves
    eps_hbo2, eps_hb = ExtinctionTable.bundled().lookup(camera.wavelengths)
    w = camera.response * camera.light_source * camera.transmission
    lam = camera.wavelengths
    for b in (0, 8, 15):
        num = np.trapezoid(w[b] * eps_hbo2, x=lam)
        den = np.trapezoid(w[b], x=lam)
        assert m[b, 0] == pytest.approx(num / den, rel=1e-12)
        num = np.trapezoid(w[b] * eps_hb, x=lam)
        assert m[b, 1] == pytest.approx(num / den, rel=1e-12)


def test_forward_model_recovery_across_saturations(endmembers):
    for so2 in (0.0, 0.25, 0.5, 0.75, 1.0):
        got, degenerate = unmix_so2(_forward(endmembers, so2), endmembers)
        assert not degenerate
        assert got == pytest.approx(so2, abs=1e-6)


def test_scale_invariance(endmembers):
    r = _forward(endmembers, 0.6)
    base, _ = unmix_so2(r, endmembers)
    for c in (0.1, 10.0):
        # global scaling only shifts the free offset term
        scaled, degenerate = unmix_so2(c * r, endmembers)
        assert not degenerate
        assert scaled == pytest.approx(base, abs=1e-9)


def test_flat_spectrum_is_degenerate(endmembers):
    so2, degenerate = unmix_so2(np.full(16, 0.37), endmembers)
    assert degenerate and so2 == 0.5


def test_band_spectrum_input(endmembers):
    r = _forward(endmembers, 0.3)
    a = unmix_so2(BandSpectrum(values=r), endmembers)
    b = unmix_so2(r, endmembers)
    assert a == b


def test_unmix_so2_errors(endmembers):
    with pytest.raises(ShapeError):
        unmix_so2(np.ones(5), endmembers)
    bad = _forward(endmembers, 0.5)
    bad[3] = 0.0
    with pytest.raises(AbsorbanceError):
        unmix_so2(bad, endmembers)


def test_unmix_map_matches_single_pixel_path(endmembers):
    rng = substream(0, "unmix-map")
    so2_true = rng.uniform(0.0, 1.0, (3, 4))
    cube = np.stack([
        np.stack([_forward(endmembers, s) for s in row]) for row in so2_true
    ])
    got, flags = unmix_map(cube, endmembers, backend="numpy")
    assert got.shape == (3, 4) and got.dtype == np.float64
    assert not flags.any()
    np.testing.assert_allclose(got, so2_true, atol=1e-6)
    single = unmix_so2(cube[1, 2], endmembers)[0]
    assert got[1, 2] == pytest.approx(single, abs=1e-12)


def test_unmix_map_marks_bad_pixels(endmembers):
    cube = np.stack([_forward(endmembers, 0.5)] * 6).reshape(2, 3, 16).copy()
    cube[0, 1] = 0.0          # no absorbance
    cube[1, 2] = 0.37         # flat: no hemoglobin signal
    so2, flags = unmix_map(cube, endmembers, backend="numpy")
    assert flags[0, 1] and flags[1, 2]
    assert so2[0, 1] == 0.5 and so2[1, 2] == 0.5
    assert not flags[0, 0] and so2[0, 0] == pytest.approx(0.5, abs=1e-6)


def test_unmix_map_backends_agree(endmembers):
    rng = substream(1, "unmix-backends")
    cube = np.exp(-(rng.uniform(0.0, 1.0, (4, 5, 16)) * 0.5 + 0.05))
    cube[0, 0] = 0.0      # absorbance failure
    cube[2, 3] = 0.42     # degenerate fit
    ref, ref_flags = unmix_map(cube, endmembers, backend="numpy")
    fast, fast_flags = unmix_map(cube, endmembers, backend="numba")
    np.testing.assert_allclose(fast, ref, atol=1e-12)
    np.testing.assert_array_equal(fast_flags, ref_flags)


def test_correction_matrix_inverts_crosstalk(endmembers):
    r = _forward(endmembers, 0.7)
    mix = 0.9 * np.eye(16) + 0.1 * np.roll(np.eye(16), 1, axis=1)
    observed = mix @ r
    base, _ = unmix_so2(r, endmembers)
    fixed, _ = unmix_so2(observed, endmembers, correction=np.linalg.inv(mix))
    assert fixed == pytest.approx(base, abs=1e-9)
    with pytest.raises(ShapeError):
        unmix_so2(r, endmembers, correction=np.eye(4))


def test_endmember_csv_round_trip(tmp_path, endmembers):
    path = tmp_path / "em.csv"
    endmembers.to_csv(path)
    back = EndmemberMatrix.from_csv(path)
    np.testing.assert_array_equal(back.matrix, endmembers.matrix)

    path.write_text("wrong,header\n")
    with pytest.raises(DataFormatError):
        EndmemberMatrix.from_csv(path)
    path.write_text("band,eps_hbo2,eps_hb,offset,slope\n0,1.0,oops,1.0,0.0\n")
    with pytest.raises(DataFormatError):
        EndmemberMatrix.from_csv(path)


def test_endmember_validation():
    good = np.column_stack([np.exp(np.linspace(0, 1, 8)), np.linspace(2, 1, 8) ** 2,
                            np.ones(8), np.arange(8) - 3.5])
    EndmemberMatrix(matrix=good)
    dup = good.copy()
    dup[:, 1] = dup[:, 0]
    with pytest.raises(ShapeError, match="rank"):
        EndmemberMatrix(matrix=dup)
    with pytest.raises(ShapeError):
        EndmemberMatrix(matrix=good[:3])
    bad = good.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ShapeError):
        EndmemberMatrix(matrix=bad)


def test_unmix_map_rejects_wrong_band_count(endmembers):
    with pytest.raises(ShapeError):
        unmix_map(np.ones((2, 2, 5)), endmembers)
