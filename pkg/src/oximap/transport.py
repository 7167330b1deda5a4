"""Monte-Carlo light transport through a layered tissue block.

Photons enter the top face of a voxelized block (uniform planar source,
normal incidence), random-walk with Henyey-Greenstein scattering and
continuous absorption weighting, and leave through the top (diffuse
reflectance), the bottom (transmission), or die by roulette / path cap.
The air-tissue interface reflects by Fresnel's equations; layer-to-layer
interfaces are treated as index-matched.

Fluence is tallied per depth slice; the 1/e optical penetration depth is
read off the depth profile relative to the surface slice.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import _transport_numba as _tk
from ._accel import HAVE_NUMBA, resolve_backend
from ._transport_numpy import run_numpy
from .errors import ConfigError, ShapeError
from .optics import ExtinctionTable, TissueSample, optical_properties
from .rng import derive_key

DEFAULT_WAVELENGTHS = np.arange(440.0, 641.0, 4.0)  # 51 bands, 440..640 nm

_TALLY_NAMES = ("specular", "diffuse", "transmitted", "absorbed", "roulette", "terminated")


@dataclass(frozen=True)
class VoxelGrid:
    """Lateral voxel counts and depth slicing for one tissue sample."""

    nx: int = 20
    ny: int = 20
    voxel_size_mm: float = 0.01
    layer_boundaries_mm: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("grid needs at least one voxel per lateral axis")
        if not self.voxel_size_mm > 0:
            raise ConfigError(f"voxel_size_mm must be positive, got {self.voxel_size_mm}")
        zb = self.layer_boundaries_mm
        if len(zb) != 4:
            raise ConfigError("layer_boundaries_mm must hold 4 ascending values")
        if zb[0] != 0.0 or any(nxt <= prev for prev, nxt in zip(zb[:-1], zb[1:])):
            raise ConfigError(f"layer boundaries must ascend from 0, got {zb}")

    @classmethod
    def for_tissue(cls, tissue: TissueSample, nx: int = 20, ny: int = 20,
                   voxel_size_mm: float = 0.01) -> "VoxelGrid":
        return cls(nx=nx, ny=ny, voxel_size_mm=voxel_size_mm,
                   layer_boundaries_mm=tuple(tissue.boundaries_mm()))

    @property
    def total_depth_mm(self) -> float:
        return self.layer_boundaries_mm[-1]

    @property
    def depth_slices(self) -> int:
        return int(math.ceil(self.total_depth_mm / self.voxel_size_mm - 1e-12))

    @property
    def lateral_extent_mm(self) -> Tuple[float, float]:
        return (self.nx * self.voxel_size_mm, self.ny * self.voxel_size_mm)


@dataclass(frozen=True)
class GridSpec:
    """Grid template from which per-tissue VoxelGrids are derived."""

    nx: int = 20
    ny: int = 20
    voxel_size_mm: float = 0.01

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or not self.voxel_size_mm > 0:
            raise ConfigError("grid template needs positive voxel counts and size")

    def for_tissue(self, tissue: TissueSample) -> "VoxelGrid":
        return VoxelGrid.for_tissue(tissue, self.nx, self.ny, self.voxel_size_mm)


@dataclass(frozen=True)
class TransportConfig:
    n_photons: int = 100_000
    roulette_threshold: float = 1e-4
    roulette_survival: float = 10.0
    max_path_mm: float = 25.0
    lateral: str = "periodic"

    def __post_init__(self):
        if self.n_photons < 1:
            raise ConfigError(f"n_photons must be >= 1, got {self.n_photons}")
        if not 0.0 < self.roulette_threshold < 1.0:
            raise ConfigError("roulette_threshold must be in (0, 1)")
        if not self.roulette_survival > 1.0:
            raise ConfigError("roulette_survival must exceed 1")
        if not 0.0 < self.max_path_mm < float("inf"):
            raise ConfigError("max_path_mm must be positive and finite")
        if self.lateral not in ("periodic", "reflect"):
            raise ConfigError(f"lateral must be 'periodic' or 'reflect', got {self.lateral!r}")


@dataclass(frozen=True)
class TransportResult:
    """Single-wavelength outcome, all weights normalized per launched photon."""

    wavelength: float
    reflectance: float
    specular: float
    transmitted: float
    absorbed: float
    roulette_net: float
    terminated: float
    fluence_mm: np.ndarray
    penetration_mm: float
    degenerate: bool
    n_photons: int

    @property
    def conservation_residual(self) -> float:
        total = (self.specular + self.reflectance + self.transmitted
                 + self.absorbed + self.roulette_net + self.terminated)
        return abs(1.0 - total)


@dataclass(frozen=True)
class SimulatedSpectrum:
    wavelengths: np.ndarray
    reflectance: np.ndarray
    penetration_mm: np.ndarray
    degenerate: np.ndarray
    tissue: TissueSample
    seed: int
    n_photons: int
    fluence_mm: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def any_degenerate(self) -> bool:
        return bool(self.degenerate.any())


def penetration_depth(fluence, voxel_size_mm, total_depth_mm):
    """1/e depth of the slice fluence profile relative to the surface slice.

    Linear interpolation between slice centers; (total depth, False) when
    the profile never falls below the threshold.
    """
    f = np.asarray(fluence, float)
    if f.size == 0 or f[0] <= 0.0:
        return total_depth_mm, False
    thr = f[0] / math.e
    below = f < thr
    if not below.any():
        return total_depth_mm, False
    k = int(np.argmax(below))
    if k == 0:
        return total_depth_mm, False
    h = voxel_size_mm
    z_prev = (k - 0.5) * h
    f_prev, f_k = f[k - 1], f[k]
    depth = z_prev + (f_prev - thr) / (f_prev - f_k) * h
    return float(min(max(depth, 1e-12), total_depth_mm)), True


def _layer_arrays(tissue, wavelengths, table):
    """Per-layer coefficients in 1/mm, shapes (n_wavelengths, 3) and (3,).

    Always evaluated through the array code path so single-wavelength and
    whole-spectrum runs see bit-identical coefficients.
    """
    lam = np.atleast_1d(np.asarray(wavelengths, float))
    mua = np.empty((lam.size, 3))
    mus = np.empty((lam.size, 3))
    g = np.empty(3)
    for i, layer in enumerate(tissue.layers):
        props = optical_properties(layer, lam, table)
        mua[:, i] = np.asarray(props.mu_a) / 10.0  # 1/cm -> 1/mm
        mus[:, i] = np.asarray(props.mu_s) / 10.0
        g[i] = props.anisotropy
    return mua, mus, g


def simulate_wavelength(tissue: TissueSample, wavelength: float,
                        grid: Optional[VoxelGrid] = None,
                        config: Optional[TransportConfig] = None,
                        seed: int = 0,
                        table: Optional[ExtinctionTable] = None,
                        backend: Optional[str] = None,
                        threads: int = 1) -> TransportResult:
    """Run the walk at one wavelength.

    The random stream is keyed by (seed, round(wavelength * 1000)), so a
    wavelength always reproduces the same photons no matter where in a
    spectrum loop, batch, or thread it runs.
    """
    if grid is None:
        grid = VoxelGrid.for_tissue(tissue)
    if config is None:
        config = TransportConfig()
    if tuple(grid.layer_boundaries_mm) != tuple(tissue.boundaries_mm()):
        raise ShapeError("grid layer boundaries do not match the tissue sample")
    mua2, mus2, g = _layer_arrays(tissue, wavelength, table)
    mua, mus = mua2[0], mus2[0]
    zb = np.asarray(grid.layer_boundaries_mm, float)
    n0 = tissue.layers[0].refractive_index
    rsp = ((n0 - 1.0) / (n0 + 1.0)) ** 2
    lx, ly = grid.lateral_extent_mm
    nsl = grid.depth_slices
    lateral_mode = 0 if config.lateral == "periodic" else 1
    lam_key = derive_key(seed, int(round(wavelength * 1000)))
    n = int(config.n_photons)

    which = resolve_backend(backend)
    if which == "numba":
        nb = (n + _tk.BATCH - 1) // _tk.BATCH
        phi_parts = np.zeros((nb, nsl))
        tal_parts = np.zeros((nb, 6))
        runner = _tk.run_parallel if threads > 1 else _tk.run_serial
        if threads > 1 and HAVE_NUMBA:
            import numba

            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        runner(lam_key, n, mua, mus, g, zb, n0, rsp, lx, ly,
               grid.voxel_size_mm, config.roulette_threshold,
               config.roulette_survival, config.max_path_mm, lateral_mode,
               phi_parts, tal_parts)
        # sequential batch-order reduction, matching the spectrum kernel bit for bit
        phi = np.zeros(nsl)
        tal = np.zeros(6)
        for b in range(nb):
            phi += phi_parts[b]
            tal += tal_parts[b]
    else:
        phi, tal = run_numpy(lam_key, n, mua, mus, g, zb, n0, rsp, lx, ly,
                             grid.voxel_size_mm, config.roulette_threshold,
                             config.roulette_survival, config.max_path_mm,
                             lateral_mode, nsl)

    phi /= n
    tal = tal / n
    depth, crossed = penetration_depth(phi, grid.voxel_size_mm, grid.total_depth_mm)
    degenerate = (not crossed) or float(mua.sum() + mus.sum()) == 0.0
    return TransportResult(
        wavelength=float(wavelength),
        reflectance=float(tal[1]),
        specular=float(tal[0]),
        transmitted=float(tal[2]),
        absorbed=float(tal[3]),
        roulette_net=float(tal[4]),
        terminated=float(tal[5]),
        fluence_mm=phi,
        penetration_mm=depth,
        degenerate=degenerate,
        n_photons=n,
    )


def simulate_spectrum(tissue: TissueSample, wavelengths=None,
                      grid: Optional[VoxelGrid] = None,
                      config: Optional[TransportConfig] = None,
                      seed: int = 0,
                      table: Optional[ExtinctionTable] = None,
                      backend: Optional[str] = None,
                      threads: int = 1,
                      keep_fluence: bool = False) -> SimulatedSpectrum:
    """Run the walk across a wavelength grid (default 440..640 nm, 4 nm)."""
    if wavelengths is None:
        wavelengths = DEFAULT_WAVELENGTHS
    wavelengths = np.asarray(wavelengths, float)
    if wavelengths.ndim != 1 or wavelengths.size == 0:
        raise ShapeError("wavelengths must be a non-empty 1-d array")
    if grid is None:
        grid = VoxelGrid.for_tissue(tissue)
    if config is None:
        config = TransportConfig()
    n_lam = wavelengths.size
    refl = np.empty(n_lam)
    depth = np.empty(n_lam)
    degen = np.zeros(n_lam, bool)
    which = resolve_backend(backend)
    if which == "numba":
        # one kernel call for the whole grid; per-wavelength streams are keyed
        # exactly as simulate_wavelength keys them, so both entry points agree
        mua, mus, g = _layer_arrays(tissue, wavelengths, table)
        lam_keys = np.array(
            [derive_key(seed, int(round(l * 1000))) for l in wavelengths], np.uint64
        )
        zb = np.asarray(grid.layer_boundaries_mm, float)
        n0 = tissue.layers[0].refractive_index
        rsp = ((n0 - 1.0) / (n0 + 1.0)) ** 2
        lx, ly = grid.lateral_extent_mm
        lateral_mode = 0 if config.lateral == "periodic" else 1
        phi_out = np.zeros((n_lam, grid.depth_slices))
        tal_out = np.zeros((n_lam, 6))
        runner = _tk.run_spectrum_parallel if threads > 1 else _tk.run_spectrum_serial
        if threads > 1 and HAVE_NUMBA:
            import numba

            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        runner(lam_keys, int(config.n_photons), mua, mus, g, zb, n0, rsp,
               lx, ly, grid.voxel_size_mm, config.roulette_threshold,
               config.roulette_survival, config.max_path_mm, lateral_mode,
               phi_out, tal_out)
        n = float(config.n_photons)
        flu = phi_out / n if keep_fluence else None
        for i in range(n_lam):
            refl[i] = tal_out[i, 1] / n
            p, crossed = penetration_depth(phi_out[i] / n, grid.voxel_size_mm,
                                           grid.total_depth_mm)
            depth[i] = p
            degen[i] = (not crossed) or float(mua[i].sum() + mus[i].sum()) == 0.0
    else:
        flu = np.empty((n_lam, grid.depth_slices)) if keep_fluence else None
        for i, lam in enumerate(wavelengths):
            res = simulate_wavelength(tissue, lam, grid, config, seed, table,
                                      backend, threads)
            refl[i] = res.reflectance
            depth[i] = res.penetration_mm
            degen[i] = res.degenerate
            if keep_fluence:
                flu[i] = res.fluence_mm
    return SimulatedSpectrum(
        wavelengths=wavelengths,
        reflectance=refl,
        penetration_mm=depth,
        degenerate=degen,
        tissue=tissue,
        seed=int(seed),
        n_photons=int(config.n_photons),
        fluence_mm=flu,
    )


def prewarm(backend: Optional[str] = None) -> None:
    """Compile (or exercise) the kernels once so later timing is clean."""
    from .optics import LayerParams

    layer = LayerParams(0.5, 0.05, 0.4, 20.0, 1.2, 0.9, 1.37)
    tissue = TissueSample(layers=(layer, layer, layer))
    cfg = TransportConfig(n_photons=64)
    simulate_wavelength(tissue, 500.0, config=cfg, seed=0, backend=backend, threads=1)
    if resolve_backend(backend) == "numba":
        simulate_wavelength(tissue, 500.0, config=cfg, seed=0, backend=backend, threads=2)
