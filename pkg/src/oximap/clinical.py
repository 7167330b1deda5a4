"""Frame ingestion and validation utilities.

Covers the downstream half of the pipeline: calibrating raw camera frames
(dark subtraction, mosaic demosaicking, light-source division, per-pixel
area normalization), averaging oxygenation maps over measurement ROIs,
fitting the exponential lactate model, rendering maps to PNG with a float
sidecar, and timing per-frame inference.
"""

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from ._accel import HAVE_NUMBA
from .errors import (
    CalibrationError,
    ConfigError,
    DataFormatError,
    FitError,
    RangeError,
    ShapeError,
)
from .network import Network, infer_map
from .unmixing import EndmemberMatrix, unmix_map

MOSAIC_TILE = 4
SITE_KINDS = ("well_perfused", "anastomosis", "ischemic")

_MANIFEST_HEADER = ["frame_id", "site_kind", "x", "y", "lactate_mmol_per_l"]

# Anchor colors for the default map palette: dark purple through teal to
# bright yellow, with steadily increasing luminance across the anchors.
_DEFAULT_ANCHORS = np.array(
    [
        (68, 1, 84),
        (72, 26, 108),
        (71, 47, 125),
        (65, 68, 135),
        (57, 86, 140),
        (49, 104, 142),
        (42, 120, 142),
        (35, 136, 142),
        (31, 152, 139),
        (34, 168, 132),
        (53, 183, 121),
        (84, 197, 104),
        (122, 209, 81),
        (165, 219, 54),
        (210, 226, 27),
        (253, 231, 37),
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Frame:
    """A camera frame: an (h, w, bands) stack plus its calibration state.

    ``degenerate`` marks pixels whose spectrum had no positive area during
    normalization; their band values are zeroed rather than divided.
    """

    cube: np.ndarray
    calibrated: bool = False
    degenerate: Optional[np.ndarray] = None
    dark: Optional[np.ndarray] = None
    light_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        cube = np.asarray(self.cube)
        if cube.ndim != 3:
            raise ShapeError(f"frame cube must be (h, w, bands), got {cube.shape}")
        if self.calibrated:
            if not np.isfinite(cube).all():
                raise CalibrationError("calibrated cube contains non-finite values")
            if self.degenerate is None or self.degenerate.shape != cube.shape[:2]:
                raise ShapeError("calibrated frame needs an (h, w) degenerate mask")
        object.__setattr__(self, "cube", cube)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.cube.shape


@dataclass(frozen=True)
class Roi:
    """Axis-aligned pixel rectangle, (x, y) top-left, default 20x20."""

    x: int
    y: int
    width: int = 20
    height: int = 20

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise RangeError("roi width and height must be at least 1")


def roi_around(x: int, y: int, size: int = 20) -> Roi:
    """The size x size rectangle centered on a sampling point."""
    return Roi(x=int(x) - size // 2, y=int(y) - size // 2, width=size, height=size)


@dataclass(frozen=True)
class RoiMeasurement:
    """One lactate sample: where it was drawn, what kind of site, the value."""

    roi: Roi
    lactate: float
    site_kind: str

    def __post_init__(self):
        if not self.lactate > 0:
            raise RangeError(f"lactate must be positive mmol/L, got {self.lactate}")
        if self.site_kind not in SITE_KINDS:
            raise ConfigError(
                f"site_kind must be one of {SITE_KINDS}, got {self.site_kind!r}"
            )


@dataclass(frozen=True)
class LactateFit:
    """Exponential model lactate = a * exp(b * o2) with its fit metrics.

    ``mae`` and ``mae_std`` are on the natural mmol/L scale; ``r_squared``
    comes from the log-scale regression; ``correlation`` is the Pearson
    coefficient between the raw o2 and lactate values.
    """

    a: float
    b: float
    mae: float
    mae_std: float
    r_squared: float
    correlation: float
    n_points: int

    def predict(self, o2):
        return self.a * np.exp(self.b * np.asarray(o2, float))


def _upsample_axis(arr: np.ndarray, size: int, offset: int, axis: int) -> np.ndarray:
    """Linear interpolation of one mosaic subgrid axis back to full size.

    Subgrid sample i sits at full-resolution coordinate tile*i + offset;
    queries outside the sampled span clamp to the edge value.
    """
    n = arr.shape[axis]
    coords = (np.arange(size) - offset) / float(MOSAIC_TILE)
    coords = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = size
    f = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - f) + np.take(arr, hi, axis=axis) * f


def demosaic_bilinear(plane: np.ndarray) -> np.ndarray:
    """Expand a 4x4-mosaic image (h, w) to an (h, w, 16) band stack.

    Band b is sampled at mosaic offsets (b // 4, b % 4); each band's sparse
    subgrid is bilinearly interpolated back to the full frame.  A spatially
    constant scene therefore demosaics to a constant per-band stack.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"mosaic image must be 2-d, got shape {plane.shape}")
    h, w = plane.shape
    if h % MOSAIC_TILE or w % MOSAIC_TILE:
        raise ShapeError(
            f"mosaic dimensions must be multiples of {MOSAIC_TILE}, got {h}x{w}"
        )
    bands = MOSAIC_TILE * MOSAIC_TILE
    cube = np.empty((h, w, bands))
    for b in range(bands):
        oy, ox = divmod(b, MOSAIC_TILE)
        sub = plane[oy::MOSAIC_TILE, ox::MOSAIC_TILE]
        rows = _upsample_axis(sub, h, oy, axis=0)
        cube[:, :, b] = _upsample_axis(rows, w, ox, axis=1)
    return cube


def calibrate_frame(raw, dark, light_ref) -> Frame:
    """Turn a raw acquisition into a normalized reflectance Frame.

    raw is either a 2-d mosaic image or an already demosaicked (h, w, bands)
    cube; dark must broadcast against it.  Steps, in order: dark subtraction
    clamped at zero, bilinear demosaicking (mosaic input only), per-band
    division by the light-source reference, per-pixel area normalization
    over the band index.  Pixels without positive spectral area are zeroed
    and flagged in the degenerate mask.  The result cube is float32.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim not in (2, 3):
        raise ShapeError(f"raw input must be a mosaic or a cube, got shape {raw.shape}")
    try:
        dark = np.broadcast_to(np.asarray(dark, dtype=np.float64), raw.shape)
    except ValueError:
        raise ShapeError(
            f"dark reference shape {np.shape(dark)} does not match raw {raw.shape}"
        ) from None
    sub = np.maximum(raw - dark, 0.0)
    cube = demosaic_bilinear(sub) if raw.ndim == 2 else sub
    light = np.asarray(light_ref, dtype=np.float64)
    if light.shape != (cube.shape[2],):
        raise ShapeError(
            f"light reference must have shape ({cube.shape[2]},), got {light.shape}"
        )
    if not np.isfinite(light).all() or (light <= 0).any():
        raise CalibrationError("light reference must be strictly positive and finite")
    cube = cube / light
    area = np.trapezoid(cube, axis=2)
    degenerate = ~(area > 0)
    safe = np.where(degenerate, 1.0, area)
    cube = np.where(degenerate[:, :, None], 0.0, cube / safe[:, :, None])
    return Frame(
        cube=cube.astype(np.float32),
        calibrated=True,
        degenerate=degenerate,
        dark=None if np.all(dark == 0) else dark,
        light_ref=light,
    )


def roi_oxygenation(so2_map: np.ndarray, roi: Roi) -> float:
    """Arithmetic mean of an oxygenation map over one rectangle."""
    m = np.asarray(so2_map, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"oxygenation map must be 2-d, got shape {m.shape}")
    h, w = m.shape
    if roi.x < 0 or roi.y < 0 or roi.x + roi.width > w or roi.y + roi.height > h:
        raise ShapeError(
            f"roi {roi} falls outside the {h}x{w} map"
        )
    return float(m[roi.y : roi.y + roi.height, roi.x : roi.x + roi.width].mean())


def fit_lactate_exponential(points) -> LactateFit:
    """Fit lactate = A * exp(B * o2) by least squares on the log scale.

    points is a sequence of (o2, lactate) pairs.  The regression is ordinary
    least squares of ln(lactate) on o2, which is deterministic and exact for
    noise-free exponential data.  Error metrics are mixed-scale on purpose:
    MAE and its standard deviation compare measured and predicted lactate in
    mmol/L, r_squared is taken from the log-scale regression, and the
    correlation is Pearson's coefficient on the raw values.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) points, got shape {np.shape(points)}")
    n = pts.shape[0]
    if n < 3:
        raise FitError(f"exponential fit needs at least 3 points, got {n}")
    o2 = pts[:, 0]
    lactate = pts[:, 1]
    if not np.isfinite(pts).all():
        raise FitError("fit points must be finite")
    if (lactate <= 0).any():
        raise FitError("lactate values must be positive for the log-scale fit")
    dx = o2 - o2.mean()
    var = float(dx @ dx)
    if var <= 0:
        raise FitError("o2 values are constant, the fit is singular")
    y = np.log(lactate)
    b = float(dx @ (y - y.mean())) / var
    ln_a = float(y.mean() - b * o2.mean())
    a = float(np.exp(ln_a))
    resid = y - (ln_a + b * o2)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    abs_err = np.abs(lactate - a * np.exp(b * o2))
    correlation = float(np.corrcoef(o2, lactate)[0, 1])
    return LactateFit(
        a=a,
        b=b,
        mae=float(abs_err.mean()),
        mae_std=float(abs_err.std()),
        r_squared=r_squared,
        correlation=correlation,
        n_points=n,
    )


def build_palette(anchors=None) -> np.ndarray:
    """Expand palette anchor colors into a 256-entry uint8 RGB lookup table."""
    anchors = _DEFAULT_ANCHORS if anchors is None else np.asarray(anchors, np.float64)
    if anchors.ndim != 2 or anchors.shape[1] != 3 or anchors.shape[0] < 2:
        raise ConfigError(
            f"palette anchors must be (k >= 2, 3) RGB rows, got {anchors.shape}"
        )
    pos = np.linspace(0.0, 1.0, anchors.shape[0])
    t = np.linspace(0.0, 1.0, 256)
    lut = np.stack([np.interp(t, pos, anchors[:, c]) for c in range(3)], axis=1)
    return np.clip(np.round(lut), 0, 255).astype(np.uint8)


def render_oxygenation_map(so2_map, path, anchors=None) -> Tuple[Path, Path]:
    """Write an oxygenation map as a PNG plus a float32 .npy sidecar.

    Map values must lie in [0, 1]; 0 maps to the palette's first color and
    1 to its last.  The sidecar holds the map cast to float32, so reloading
    it reproduces that cast bit-exactly.  Returns (png_path, sidecar_path).
    """
    m = np.asarray(so2_map, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"oxygenation map must be 2-d, got shape {m.shape}")
    if not np.isfinite(m).all() or m.min() < 0.0 or m.max() > 1.0:
        raise RangeError("map values must be finite and within [0, 1]")
    lut = build_palette(anchors)
    rgb = lut[np.round(m * 255.0).astype(np.intp)]
    png_path = Path(path).with_suffix(".png")
    sidecar_path = png_path.with_suffix(".npy")
    Image.fromarray(rgb, mode="RGB").save(png_path)
    np.save(sidecar_path, m.astype(np.float32))
    return png_path, sidecar_path


@dataclass(frozen=True)
class TimingReport:
    """Per-frame inference timing over a fixed iteration count."""

    method: str
    mean_ms: float
    std_ms: float
    fps: float
    iterations: int
    threads: int

    def as_lines(self):
        yield f"method {self.method}"
        yield f"iterations {self.iterations}"
        yield f"threads {self.threads}"
        yield f"mean_ms {self.mean_ms:.4f}"
        yield f"std_ms {self.std_ms:.4f}"
        yield f"fps {self.fps:.3f}"

    def as_text(self) -> str:
        return "\n".join(self.as_lines()) + "\n"


def _frame_cube(frame) -> np.ndarray:
    cube = frame.cube if isinstance(frame, Frame) else np.asarray(frame)
    if cube.ndim != 3:
        raise ShapeError(f"benchmark frame must be (h, w, bands), got {cube.shape}")
    return cube


def benchmark_inference(method, frame, iterations: int = 1000,
                        threads: int = 1, label: str = None) -> TimingReport:
    """Time one full-frame inference pass, repeated ``iterations`` times.

    method is a trained Network, an EndmemberMatrix, or any callable taking
    the (h, w, bands) cube.  The network path includes its per-pixel input
    normalization in the measured time.  One untimed warmup call runs first;
    the numba thread count is pinned to ``threads`` and reported.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be at least 1, got {iterations}")
    if threads < 1:
        raise ConfigError(f"threads must be at least 1, got {threads}")
    cube = _frame_cube(frame)
    if isinstance(method, Network):
        run = lambda: infer_map(method, cube)
        name = label or "network"
    elif isinstance(method, EndmemberMatrix):
        run = lambda: unmix_map(cube, method)[0]
        name = label or "unmixing"
    elif callable(method):
        run = lambda: method(cube)
        name = label or getattr(method, "__name__", "callable")
    else:
        raise ConfigError(
            "method must be a Network, an EndmemberMatrix, or a callable"
        )
    if HAVE_NUMBA:
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    run()  # warmup: compilation and allocator effects stay out of the samples
    samples = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        run()
        samples[i] = (time.perf_counter() - t0) * 1e3
    mean = float(samples.mean())
    return TimingReport(
        method=name,
        mean_ms=mean,
        std_ms=float(samples.std()),
        fps=1e3 / mean if mean > 0 else float("inf"),
        iterations=iterations,
        threads=threads,
    )


def load_roi_manifest(path):
    """Read a sampling-site manifest CSV.

    Columns: frame_id,site_kind,x,y,lactate_mmol_per_l.  (x, y) is the
    sampling point; each row becomes the default 20x20 ROI centered there.
    Returns a list of (frame_id, RoiMeasurement) tuples in file order.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _MANIFEST_HEADER:
            raise DataFormatError(
                f"manifest header must be {','.join(_MANIFEST_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(_MANIFEST_HEADER):
                raise DataFormatError(
                    f"manifest line {lineno}: expected {len(_MANIFEST_HEADER)} fields"
                )
            frame_id, site_kind, xs, ys, ls = (field.strip() for field in row)
            if site_kind not in SITE_KINDS:
                raise DataFormatError(
                    f"manifest line {lineno}: unknown site_kind {site_kind!r}"
                )
            try:
                x, y = int(xs), int(ys)
                lactate = float(ls)
            except ValueError:
                raise DataFormatError(
                    f"manifest line {lineno}: x, y must be integers and "
                    f"lactate a number"
                ) from None
            if not lactate > 0:
                raise DataFormatError(
                    f"manifest line {lineno}: lactate must be positive mmol/L"
                )
            rows.append(
                (frame_id, RoiMeasurement(roi=roi_around(x, y),
                                          lactate=lactate, site_kind=site_kind))
            )
    return rows
