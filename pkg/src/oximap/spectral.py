"""Adapting simulated reflectance spectra to a filter-array camera.

A camera model carries per-band spectral responses on the simulation
wavelength grid, the illuminant, the optical-path transmission, and an
optional band correction matrix.  A band value is the response-weighted
trapezoidal integral of reflectance, normalized by the same integral of
the response alone; optional white Gaussian noise enters the numerator at
a configured signal-to-noise ratio (amplitude convention, dB = 20 log10).

Band spectra are normalized by their area under the curve over the band
index axis, which makes them invariant to global intensity scaling.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataFormatError, NormalizationError, ShapeError
from .optics import TissueSample
from .rng import substream
from .transport import DEFAULT_WAVELENGTHS, SimulatedSpectrum


@dataclass(frozen=True)
class CameraConfig:
    bands: int = 16
    fwhm_nm: float = 15.0
    center_min_nm: float = 460.0
    center_max_nm: float = 600.0
    wavelengths: np.ndarray = field(default_factory=lambda: DEFAULT_WAVELENGTHS.copy())
    response_csv: Optional[str] = None
    light_source_csv: Optional[str] = None
    transmission_csv: Optional[str] = None
    correction_csv: Optional[str] = None

    def __post_init__(self):
        if self.bands < 2:
            raise ConfigError(f"camera needs at least 2 bands, got {self.bands}")
        if not self.fwhm_nm > 0:
            raise ConfigError("fwhm_nm must be positive")
        if not self.center_min_nm < self.center_max_nm:
            raise ConfigError("band center range must be increasing")


@dataclass(frozen=True)
class CameraModel:
    wavelengths: np.ndarray
    band_centers_nm: np.ndarray
    response: np.ndarray  # (bands, wavelengths)
    light_source: np.ndarray  # (wavelengths,)
    transmission: np.ndarray  # (wavelengths,)
    correction: np.ndarray  # (bands, bands)

    @property
    def bands(self) -> int:
        return self.response.shape[0]

    def __post_init__(self):
        nl = self.wavelengths.size
        nb = self.band_centers_nm.size
        if self.response.shape != (nb, nl):
            raise ShapeError(f"response must be ({nb}, {nl}), got {self.response.shape}")
        if self.light_source.shape != (nl,) or self.transmission.shape != (nl,):
            raise ShapeError("light source and transmission must match the wavelength grid")
        if self.correction.shape != (nb, nb):
            raise ShapeError(f"correction must be ({nb}, {nb})")
        if (self.response < 0).any():
            raise ConfigError("band responses must be non-negative")
        if (self.light_source <= 0).any() or (self.transmission <= 0).any():
            raise ConfigError("light source and transmission must be positive")
        weights = self.response * self.light_source * self.transmission
        if (np.trapezoid(weights, x=self.wavelengths, axis=1) <= 0).any():
            raise ConfigError("every band needs positive integrated response")


def _column_csv(path, wavelengths, what):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise DataFormatError(f"{what} CSV must have wavelength_nm,value columns")
    w = data[:, 0]
    if w[0] > wavelengths[0] or w[-1] < wavelengths[-1]:
        raise DataFormatError(f"{what} CSV does not cover the wavelength grid")
    return np.interp(wavelengths, w, data[:, 1])


def make_camera_model(config: CameraConfig = None) -> CameraModel:
    """Build the camera description; defaults give 16 Gaussian bands.

    Band centers are evenly spaced over [center_min, center_max]; the
    Gaussian sigma comes from the FWHM.  CSV inputs override the Gaussian
    response, the flat illuminant/transmission, or the identity correction.
    """
    if config is None:
        config = CameraConfig()
    lam = np.asarray(config.wavelengths, float)
    if lam.ndim != 1 or lam.size < 2 or not (np.diff(lam) > 0).all():
        raise ConfigError("wavelength grid must be 1-d and strictly ascending")
    centers = np.linspace(config.center_min_nm, config.center_max_nm, config.bands)
    if config.response_csv is not None:
        raw = np.loadtxt(config.response_csv, delimiter=",", skiprows=1, ndmin=2)
        if raw.shape[1] != config.bands + 1:
            raise DataFormatError(
                f"response CSV must have wavelength_nm plus {config.bands} band columns"
            )
        response = np.empty((config.bands, lam.size))
        for b in range(config.bands):
            response[b] = np.interp(lam, raw[:, 0], raw[:, b + 1])
    else:
        sigma = config.fwhm_nm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        response = np.exp(-0.5 * ((lam[None, :] - centers[:, None]) / sigma) ** 2)
    light = (
        _column_csv(config.light_source_csv, lam, "light source")
        if config.light_source_csv
        else np.ones(lam.size)
    )
    trans = (
        _column_csv(config.transmission_csv, lam, "transmission")
        if config.transmission_csv
        else np.ones(lam.size)
    )
    if config.correction_csv is not None:
        corr = np.loadtxt(config.correction_csv, delimiter=",", ndmin=2)
        if corr.shape != (config.bands, config.bands):
            raise DataFormatError("correction CSV must be a square band matrix")
    else:
        corr = np.eye(config.bands)
    return CameraModel(
        wavelengths=lam,
        band_centers_nm=centers,
        response=response,
        light_source=light,
        transmission=trans,
        correction=corr,
    )


@dataclass(frozen=True)
class BandSpectrum:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 1 or v.size < 2:
            raise ShapeError("band spectrum must be a 1-d array of at least 2 bands")
        object.__setattr__(self, "values", v)


def adapt_to_camera(spectrum, camera: CameraModel, snr_db: Optional[float] = None,
                    noise_rng=None) -> BandSpectrum:
    """Project a reflectance spectrum onto the camera bands.

    spectrum is a SimulatedSpectrum or a bare reflectance array on the
    camera's wavelength grid.  With snr_db set, each band value receives
    white Gaussian noise of standard deviation |value| * 10^(-snr/20);
    noise_rng is an integer seed or numpy Generator (seed 0 by default).
    """
    if isinstance(spectrum, SimulatedSpectrum):
        if spectrum.wavelengths.shape != camera.wavelengths.shape or not np.array_equal(
            spectrum.wavelengths, camera.wavelengths
        ):
            raise ShapeError("spectrum and camera wavelength grids differ")
        refl = spectrum.reflectance
    else:
        refl = np.asarray(spectrum, float)
        if refl.shape != camera.wavelengths.shape:
            raise ShapeError(
                f"reflectance shape {refl.shape} does not match the camera grid"
            )
    weights = camera.response * camera.light_source * camera.transmission
    lam = camera.wavelengths
    denom = np.trapezoid(weights, x=lam, axis=1)
    numer = np.trapezoid(weights * refl[None, :], x=lam, axis=1)
    values = numer / denom
    if snr_db is not None:
        if noise_rng is None:
            noise_rng = 0
        rng = (
            noise_rng
            if isinstance(noise_rng, np.random.Generator)
            else substream(int(noise_rng), "band-noise")
        )
        sigma = np.abs(values) * 10.0 ** (-snr_db / 20.0)
        values = values + rng.normal(0.0, 1.0, values.size) * sigma
    return BandSpectrum(values=values, normalized=False)


def auc_normalize(spectrum: BandSpectrum) -> BandSpectrum:
    """Scale so the trapezoidal area over the band index axis is 1.

    A constant spectrum of B bands maps to entries 1/(B-1); applying the
    normalization twice is a no-op up to floating point.
    """
    area = float(np.trapezoid(spectrum.values))
    if not area > 0.0 or not np.isfinite(area):
        raise NormalizationError(f"band spectrum area must be positive, got {area}")
    return BandSpectrum(values=spectrum.values / area, normalized=True)


def label_oxygenation(tissue: TissueSample, penetration_mm) -> float:
    """Depth-aware oxygenation label.

    At each wavelength the layer saturations are averaged with weights
    proportional to each layer's overlap with [0, penetration depth]; the
    label is the plain mean of those per-wavelength values.
    """
    p = np.atleast_1d(np.asarray(penetration_mm, float))
    if (p <= 0).any():
        raise ConfigError("penetration depths must be positive")
    zb = tissue.boundaries_mm()
    sat = np.array([l.oxygenation for l in tissue.layers])
    overlap = np.clip(
        np.minimum(p[:, None], zb[None, 1:]) - zb[None, :-1], 0.0, None
    )
    frac = overlap / p[:, None]
    return float(np.mean(frac @ sat))


@dataclass(frozen=True)
class LabeledSample:
    spectrum: BandSpectrum
    oxygenation: float
    domain_label: int = 0

    def __post_init__(self):
        if not 0.0 <= self.oxygenation <= 1.0:
            raise ConfigError(f"oxygenation label must be in [0, 1], got {self.oxygenation}")
        if self.domain_label not in (0, 1):
            raise ConfigError("domain label must be 0 (simulated) or 1 (real)")
