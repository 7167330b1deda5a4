"""Tissue model and optical properties.

A tissue sample is a stack of three homogeneous layers.  Each layer is
described by its hemoglobin oxygen saturation, blood volume fraction,
thickness, scattering amplitude/power, anisotropy and refractive index.

Units: wavelengths nm, thicknesses mm, absorption/scattering coefficients
1/cm (converted to 1/mm only inside the transport kernels), molar
extinction 1/(cm*M).  The scattering amplitude is the reduced scattering
coefficient at 500 nm; dividing by (1 - g) turns the power-law value into
the raw scattering coefficient used by the random walk.
"""

from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ConfigError, DataFormatError, RangeError
from .rng import substream

LN10 = float(np.log(10.0))
# 150 g/L hemoglobin in whole blood over 64500 g/mol
HEME_MOLARITY = 150.0 / 64500.0

_FIELDS = (
    "oxygenation",
    "blood_volume_fraction",
    "thickness_mm",
    "scatter_amplitude",
    "scatter_power",
    "anisotropy",
    "refractive_index",
)

DEFAULT_PRIOR_RANGES: Dict[str, Tuple[float, float]] = {
    "oxygenation": (0.0, 1.0),
    "blood_volume_fraction": (0.0, 0.30),
    "thickness_mm": (0.2, 2.0),
    "scatter_amplitude": (5.0, 50.0),
    "scatter_power": (0.3, 3.0),
    "anisotropy": (0.80, 0.95),
    "refractive_index": (1.33, 1.54),
}


@dataclass(frozen=True)
class LayerParams:
    """One homogeneous tissue layer."""

    oxygenation: float
    blood_volume_fraction: float
    thickness_mm: float
    scatter_amplitude: float
    scatter_power: float
    anisotropy: float
    refractive_index: float

    def __post_init__(self):
        if not 0.0 <= self.oxygenation <= 1.0:
            raise ConfigError(f"oxygenation must be in [0, 1], got {self.oxygenation}")
        if not 0.0 <= self.blood_volume_fraction <= 1.0:
            raise ConfigError(
                f"blood_volume_fraction must be in [0, 1], got {self.blood_volume_fraction}"
            )
        if not self.thickness_mm > 0.0:
            raise ConfigError(f"thickness_mm must be positive, got {self.thickness_mm}")
        if self.scatter_amplitude < 0.0:
            raise ConfigError(
                f"scatter_amplitude must be non-negative, got {self.scatter_amplitude}"
            )
        if not -1.0 < self.anisotropy < 1.0:
            raise ConfigError(f"anisotropy must be in (-1, 1), got {self.anisotropy}")
        if self.refractive_index < 1.0:
            raise ConfigError(
                f"refractive_index must be >= 1, got {self.refractive_index}"
            )


@dataclass(frozen=True)
class TissueSample:
    layers: Tuple[LayerParams, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ConfigError(f"expected 3 layers, got {len(self.layers)}")

    @property
    def total_thickness_mm(self) -> float:
        return sum(l.thickness_mm for l in self.layers)

    def boundaries_mm(self) -> np.ndarray:
        """Cumulative layer interfaces from the surface: [0, d1, d1+d2, total]."""
        d = np.array([l.thickness_mm for l in self.layers], float)
        return np.concatenate([[0.0], np.cumsum(d)])


@dataclass(frozen=True)
class PriorConfig:
    """Per-field uniform sampling ranges, with optional per-layer overrides."""

    ranges: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PRIOR_RANGES)
    )
    layer_overrides: Tuple[Mapping[str, Tuple[float, float]], ...] = ({}, {}, {})

    def __post_init__(self):
        for name in self.ranges:
            if name not in _FIELDS:
                raise ConfigError(f"unknown prior field {name!r}")
        missing = [f for f in _FIELDS if f not in self.ranges]
        if missing:
            raise ConfigError(f"prior ranges missing fields: {missing}")
        if len(self.layer_overrides) != 3:
            raise ConfigError("layer_overrides must have one entry per layer")
        for i, over in enumerate(self.layer_overrides):
            for name in over:
                if name not in _FIELDS:
                    raise ConfigError(f"unknown prior field {name!r} in layer {i}")
        for name, lohi in self._all_ranges():
            lo, hi = lohi
            if not lo <= hi:
                raise ConfigError(f"prior range for {name!r} has lo > hi: {lohi}")

    def _all_ranges(self):
        for name, lohi in self.ranges.items():
            yield name, lohi
        for over in self.layer_overrides:
            for name, lohi in over.items():
                yield name, lohi

    def range_for(self, name: str, layer: int) -> Tuple[float, float]:
        return self.layer_overrides[layer].get(name, self.ranges[name])


def sample_tissue(priors: PriorConfig, seed: int) -> TissueSample:
    """Draw one random tissue from the priors.

    Field draw order is fixed (layers outer, canonical field order inner)
    so the same seed always yields the same tissue.
    """
    rng = substream(seed, "tissue-priors")
    layers = []
    for layer_ix in range(3):
        values = {}
        for name in _FIELDS:
            lo, hi = priors.range_for(name, layer_ix)
            values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        layers.append(LayerParams(**values))
    return TissueSample(layers=tuple(layers), seed=int(seed))


class ExtinctionTable:
    """Molar extinction of oxy/deoxyhemoglobin on an ascending nm grid."""

    def __init__(self, wavelengths, eps_hbo2, eps_hb):
        w = np.asarray(wavelengths, float)
        eo = np.asarray(eps_hbo2, float)
        ed = np.asarray(eps_hb, float)
        if w.ndim != 1 or w.shape != eo.shape or w.shape != ed.shape:
            raise DataFormatError("extinction table columns must be 1-d and equal length")
        if w.size < 2 or not (np.diff(w) > 0).all():
            raise DataFormatError("extinction wavelengths must be strictly ascending")
        if not ((eo > 0).all() and (ed > 0).all()):
            raise DataFormatError("extinction coefficients must be positive")
        self.wavelengths = w
        self.eps_hbo2 = eo
        self.eps_hb = ed

    @classmethod
    def from_csv(cls, path) -> "ExtinctionTable":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "wavelength_nm,eps_hbo2,eps_hb":
                raise DataFormatError(
                    f"unexpected extinction CSV header: {header!r}"
                )
            try:
                body = np.loadtxt(f, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise DataFormatError(f"malformed extinction CSV: {exc}") from exc
        if body.shape[1] != 3:
            raise DataFormatError("extinction CSV needs exactly 3 columns")
        return cls(body[:, 0], body[:, 1], body[:, 2])

    _bundled = None

    @classmethod
    def bundled(cls) -> "ExtinctionTable":
        """The table shipped with the package (400-700 nm, 2 nm steps)."""
        if cls._bundled is None:
            ref = resources.files("oximap.data") / "hemoglobin_extinction.csv"
            with resources.as_file(ref) as path:
                cls._bundled = cls.from_csv(path)
        return cls._bundled

    def lookup(self, wavelength):
        """Linear interpolation; scalar in, scalars out; array in, arrays out."""
        w = np.asarray(wavelength, float)
        lo, hi = self.wavelengths[0], self.wavelengths[-1]
        if np.any(w < lo) or np.any(w > hi):
            raise RangeError(
                f"wavelength outside extinction table range [{lo}, {hi}] nm"
            )
        eo = np.interp(w, self.wavelengths, self.eps_hbo2)
        ed = np.interp(w, self.wavelengths, self.eps_hb)
        if w.ndim == 0:
            return float(eo), float(ed)
        return eo, ed

    def isosbestic_wavelengths(self) -> np.ndarray:
        """Grid wavelengths where the two extinction curves coincide."""
        return self.wavelengths[self.eps_hbo2 == self.eps_hb]


@dataclass(frozen=True)
class OpticalProperties:
    """Coefficients at one wavelength (or arrays over wavelengths), 1/cm."""

    mu_a: object
    mu_s: object
    anisotropy: float
    refractive_index: float


def optical_properties(layer: LayerParams, wavelength, table: ExtinctionTable = None):
    """Absorption and scattering of a layer at the given wavelength(s).

    mu_a follows Beer-Lambert mixing of the two hemoglobin species at whole
    blood heme molarity scaled by the blood volume fraction; mu_s is the
    500 nm-anchored scattering power law divided by (1 - g).
    """
    if table is None:
        table = ExtinctionTable.bundled()
    eps_o, eps_d = table.lookup(wavelength)
    s = layer.oxygenation
    mix = s * np.asarray(eps_o) + (1.0 - s) * np.asarray(eps_d)
    mu_a = layer.blood_volume_fraction * HEME_MOLARITY * LN10 * mix
    w = np.asarray(wavelength, float)
    mu_s = (
        layer.scatter_amplitude
        * (w / 500.0) ** (-layer.scatter_power)
        / (1.0 - layer.anisotropy)
    )
    if np.ndim(wavelength) == 0:
        mu_a, mu_s = float(mu_a), float(mu_s)
    return OpticalProperties(
        mu_a=mu_a,
        mu_s=mu_s,
        anisotropy=layer.anisotropy,
        refractive_index=layer.refractive_index,
    )
