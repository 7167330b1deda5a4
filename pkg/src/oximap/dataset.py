"""Dataset generation, splitting, augmentation, and persistence.

A dataset is a flat table of normalized band spectra with an oxygenation
label and a domain label (0 = simulated, 1 = real/distorted) per row.
Pseudo-real datasets keep their labels hidden: training code must not see
them, evaluation code may (they live in `hidden_labels`).

The on-disk format is little-endian binary: a 64-byte header (magic,
version, row count, band count, flags, provenance digest), one float32
record of `bands + 2` values per row (features, label, domain), and a
trailing CRC32 of everything before it.
"""

import concurrent.futures
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DataFormatError,
    NormalizationError,
    ShapeError,
    StratificationError,
)
from .optics import ExtinctionTable, PriorConfig, sample_tissue
from .rng import derive_key, substream
from .spectral import (
    BandSpectrum,
    CameraModel,
    LabeledSample,
    adapt_to_camera,
    auc_normalize,
    label_oxygenation,
    make_camera_model,
)
from .transport import GridSpec, TransportConfig, simulate_spectrum

MAGIC = b"OXDS"
FORMAT_VERSION = 1
HEADER_BYTES = 64
TRAILER_BYTES = 4
FLAG_HIDDEN_LABELS = 1


@dataclass
class Dataset:
    """Rows of (normalized band spectrum, oxygenation, domain)."""

    features: np.ndarray
    labels: Optional[np.ndarray]
    domains: np.ndarray
    provenance: str = ""
    hidden_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        f = np.asarray(self.features, np.float32)
        if f.ndim != 2:
            raise ShapeError("features must be 2-d (rows, bands)")
        if not np.isfinite(f).all():
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", f)
        n = f.shape[0]
        if (self.labels is None) == (self.hidden_labels is None):
            raise DataError("exactly one of labels/hidden_labels must be set")
        for name in ("labels", "hidden_labels"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, np.float32)
            if arr.shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},)")
            if not np.isfinite(arr).all() or (arr < 0).any() or (arr > 1).any():
                raise DataError(f"{name} must be finite fractions in [0, 1]")
            object.__setattr__(self, name, arr)
        d = np.asarray(self.domains)
        if d.shape != (n,) or not np.isin(d, (0, 1)).all():
            raise DataError("domains must be 0/1 with one entry per row")
        object.__setattr__(self, "domains", d.astype(np.uint8))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def bands(self) -> int:
        return self.features.shape[1]

    @property
    def labels_hidden(self) -> bool:
        return self.labels is None

    def sample(self, i: int) -> LabeledSample:
        if self.labels is None:
            raise DataError("labels are hidden; use hidden_labels for evaluation only")
        return LabeledSample(
            spectrum=BandSpectrum(self.features[i].astype(np.float64), normalized=True),
            oxygenation=float(self.labels[i]),
            domain_label=int(self.domains[i]),
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, np.int64)
        return Dataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            domains=self.domains[idx],
            provenance=self.provenance,
            hidden_labels=None if self.hidden_labels is None else self.hidden_labels[idx],
        )


def _provenance_digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
    return h.hexdigest()


def generate_dataset(n: int, priors: Optional[PriorConfig] = None,
                     grid: Optional[GridSpec] = None,
                     transport: Optional[TransportConfig] = None,
                     camera: Optional[CameraModel] = None,
                     seed: int = 0, threads: int = 1,
                     table: Optional[ExtinctionTable] = None,
                     progress=None, stats: Optional[dict] = None) -> Dataset:
    """Simulate n tissues and adapt each spectrum to the camera.

    Every sample derives its tissue and photon streams from (seed, row
    index), so the result is identical for any thread count.  Rows whose
    spectrum cannot be normalized (all-dark tissue) are redrawn with a
    retry-tagged seed; persistent failure raises after 50 attempts.  When
    ``stats`` is a dict its "redraws" entry counts the discarded draws.
    """
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    priors = priors or PriorConfig()
    grid = grid or GridSpec()
    transport = transport or TransportConfig()
    camera = camera or make_camera_model()

    def one_row(i: int):
        for attempt in range(50):
            tissue_seed = int(derive_key(seed, 2 * i, attempt))
            t_seed = int(derive_key(seed, 2 * i + 1, attempt))
            tissue = sample_tissue(priors, tissue_seed)
            vg = grid.for_tissue(tissue)
            spec = simulate_spectrum(tissue, grid=vg, config=transport,
                                     seed=t_seed, table=table)
            try:
                bands = auc_normalize(adapt_to_camera(spec, camera))
            except NormalizationError:
                if stats is not None:
                    stats["redraws"] = stats.get("redraws", 0) + 1
                continue
            label = label_oxygenation(tissue, spec.penetration_mm)
            return bands.values, label
        raise DataError(f"row {i}: no usable tissue after 50 draws")

    feats = np.empty((n, camera.bands), np.float32)
    labels = np.empty(n, np.float32)
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            for i, (v, lab) in enumerate(pool.map(one_row, range(n))):
                feats[i] = v
                labels[i] = lab
                if progress is not None:
                    progress(i + 1, n)
    else:
        for i in range(n):
            v, lab = one_row(i)
            feats[i] = v
            labels[i] = lab
            if progress is not None:
                progress(i + 1, n)
    prov = _provenance_digest("generate", n, sorted(priors.ranges.items()),
                              grid, transport, camera.band_centers_nm.tolist(),
                              camera.wavelengths.tolist(), seed)
    return Dataset(features=feats, labels=np.clip(labels, 0.0, 1.0),
                   domains=np.zeros(n, np.uint8), provenance=prov)


def stratified_split(ds: Dataset, train_fraction: float = 0.8, bins: int = 10,
                     seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Label-stratified two-way split.

    Labels are binned over [0, 1]; each occupied bin is shuffled and split
    at the requested fraction (fraction rounds to the nearest row, with at
    least one row on each side).  Occupied bins with a single row cannot
    honor both sides and raise a stratification error; empty bins are fine.
    """
    if ds.labels is None:
        raise DataError("cannot stratify a hidden-label dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be strictly between 0 and 1")
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.digitize(ds.labels, edges[1:-1], right=False), 0, bins - 1)
    rng = substream(seed, "stratified-split")
    train_idx = []
    val_idx = []
    for b in range(bins):
        idx = np.nonzero(which == b)[0]
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise StratificationError(
                f"label bin {b} has a single sample; cannot split it {train_fraction:.0%}"
            )
        perm = idx[rng.permutation(idx.size)]
        k = int(round(train_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        train_idx.append(perm[:k])
        val_idx.append(perm[k:])
    train = np.sort(np.concatenate(train_idx))
    val = np.sort(np.concatenate(val_idx))
    return ds.subset(train), ds.subset(val)


def random_split(ds: Dataset, train_fraction: float = 0.8,
                 seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Plain shuffled split, for datasets whose labels are hidden."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be strictly between 0 and 1")
    n = len(ds)
    if n < 2:
        raise DataError("need at least 2 rows to split")
    rng = substream(seed, "random-split")
    perm = rng.permutation(n)
    k = min(max(int(round(train_fraction * n)), 1), n - 1)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def _renormalize_rows(x: np.ndarray) -> np.ndarray:
    areas = np.trapezoid(x, axis=1)
    if (areas <= 0).any() or not np.isfinite(areas).all():
        raise NormalizationError("a perturbed spectrum lost its positive area")
    return x / areas[:, None]


def augment_noise(ds: Dataset, snr_db: Optional[float], seed: int = 0,
                  epoch: int = 0) -> Dataset:
    """Fresh multiplicative-amplitude Gaussian noise, then re-normalization.

    snr_db None means no-op (a copy is returned).  Determinism: the noise
    stream is (seed, epoch)-keyed, so epoch e of a run always sees the same
    perturbation.
    """
    if snr_db is None:
        return ds.subset(np.arange(len(ds)))
    rng = substream(seed, "noise-augment", epoch)
    x = ds.features.astype(np.float64)
    sigma = np.abs(x) * 10.0 ** (-snr_db / 20.0)
    x = x + rng.normal(0.0, 1.0, x.shape) * sigma
    x = _renormalize_rows(x)
    return Dataset(features=x.astype(np.float32), labels=ds.labels,
                   domains=ds.domains, provenance=ds.provenance,
                   hidden_labels=ds.hidden_labels)


@dataclass(frozen=True)
class DistortionSpec:
    """Systematic camera-like distortion that manufactures a 'real' domain.

    One smooth multiplicative gain curve (shared by every row) plus small
    per-row gain jitter, nearest-neighbor band crosstalk, and band noise.
    """

    seed: int = 0
    drift_amplitude: float = 0.10
    jitter_amplitude: float = 0.03
    crosstalk: float = 0.06
    snr_db: Optional[float] = 35.0

    def __post_init__(self):
        if not 0.0 <= self.crosstalk < 0.5:
            raise ConfigError("crosstalk must be in [0, 0.5)")
        if self.drift_amplitude < 0 or self.jitter_amplitude < 0:
            raise ConfigError("distortion amplitudes must be non-negative")


def _smooth_curves(rng, n_curves, bands, amplitude):
    """exp of a random low-order trigonometric polynomial per curve."""
    u = np.linspace(0.0, 1.0, bands)
    log_gain = np.zeros((n_curves, bands))
    for order in (1, 2):
        amp = rng.uniform(-amplitude, amplitude, (n_curves, 1)) / order
        phase = rng.uniform(0.0, 2.0 * np.pi, (n_curves, 1))
        log_gain += amp * np.cos(np.pi * order * u[None, :] + phase)
    tilt = rng.uniform(-amplitude, amplitude, (n_curves, 1))
    log_gain += tilt * (u[None, :] - 0.5)
    return np.exp(log_gain)


def make_pseudo_real(ds: Dataset, spec: DistortionSpec) -> Dataset:
    """Distort a simulated dataset into a stand-in for camera data.

    Labels move to `hidden_labels` (evaluation oracle); the domain flips
    to 1.  The systematic drift curve comes from spec.seed alone, so two
    datasets distorted with the same spec share the same domain shift.
    """
    if ds.labels is None:
        raise DataError("pseudo-real input must be a labeled simulated dataset")
    rng = substream(spec.seed, "distortion")
    n, bands = ds.features.shape
    x = ds.features.astype(np.float64)
    systematic = _smooth_curves(rng, 1, bands, spec.drift_amplitude)[0]
    jitter = _smooth_curves(rng, n, bands, spec.jitter_amplitude)
    x = x * systematic[None, :] * jitter
    if spec.crosstalk > 0.0:
        c = spec.crosstalk
        mix = np.eye(bands) * (1.0 - 2.0 * c)
        mix += np.diag(np.full(bands - 1, c), 1) + np.diag(np.full(bands - 1, c), -1)
        mix[0, 0] += c
        mix[-1, -1] += c  # edge bands keep row sums at 1
        x = x @ mix.T
    if spec.snr_db is not None:
        sigma = np.abs(x) * 10.0 ** (-spec.snr_db / 20.0)
        x = x + rng.normal(0.0, 1.0, x.shape) * sigma
    x = _renormalize_rows(x)
    return Dataset(features=x.astype(np.float32), labels=None,
                   domains=np.ones(n, np.uint8),
                   provenance=_provenance_digest("pseudo-real", ds.provenance, spec),
                   hidden_labels=ds.labels)


def balanced_batches(sim: Dataset, real: Dataset, batch_size: int = 512,
                     seed: int = 0, epoch: int = 0
                     ) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (sim_features, sim_labels, real_features) batches.

    Each batch holds batch_size/2 rows from either domain.  The larger
    pool is shuffled and consumed once per epoch (remainder dropped); the
    smaller pool is resampled with replacement.  Order is a pure function
    of (seed, epoch).  The simulated pool follows the same batch-order
    stream as plain training, so for equal half-batch sizes the two loops
    see identical simulated batches.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError("batch_size must be even and >= 2")
    if sim.labels is None:
        raise DataError("simulated pool must carry visible labels")
    half = batch_size // 2
    aux = substream(seed, "balanced-batches", epoch)
    n_sim, n_real = len(sim), len(real)
    n_batches = max(n_sim, n_real) // half
    if n_batches == 0:
        raise DataError("pools are too small for even one balanced batch")
    sim_order = substream(seed, "batch-order", epoch).permutation(n_sim)
    real_order = aux.permutation(n_real)
    for b in range(n_batches):
        lo, hi = b * half, (b + 1) * half
        if n_sim >= n_real:
            si = sim_order[lo:hi]
            ri = aux.integers(0, n_real, half) if n_real < n_sim else real_order[lo:hi]
        else:
            ri = real_order[lo:hi]
            si = aux.integers(0, n_sim, half)
        yield sim.features[si], sim.labels[si], real.features[ri]


def save_dataset(ds: Dataset, path) -> None:
    flags = FLAG_HIDDEN_LABELS if ds.labels_hidden else 0
    label_col = ds.hidden_labels if ds.labels_hidden else ds.labels
    prov = bytes.fromhex(ds.provenance) if ds.provenance else b"\x00" * 32
    if len(prov) != 32:
        raise DataError("provenance must be a 64-char hex digest or empty")
    header = struct.pack("<4sIQII Q", MAGIC, FORMAT_VERSION, len(ds),
                         ds.bands, flags, 0) + prov
    assert len(header) == HEADER_BYTES
    body = np.concatenate(
        [ds.features,
         np.asarray(label_col, np.float32)[:, None],
         ds.domains.astype(np.float32)[:, None]],
        axis=1,
    ).astype("<f4").tobytes()
    blob = header + body
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(blob + struct.pack("<I", crc))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER_BYTES + TRAILER_BYTES:
        raise DataFormatError("dataset file is truncated (shorter than the header)")
    magic, version, n, bands, flags, _ = struct.unpack("<4sIQII Q", blob[:32])
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}; not a dataset file")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported dataset format version {version}")
    prov = blob[32:HEADER_BYTES]
    expected = HEADER_BYTES + n * (bands + 2) * 4 + TRAILER_BYTES
    if len(blob) != expected:
        raise DataFormatError(
            f"dataset file has {len(blob)} bytes, expected {expected}"
        )
    (crc,) = struct.unpack("<I", blob[-TRAILER_BYTES:])
    if zlib.crc32(blob[:-TRAILER_BYTES]) & 0xFFFFFFFF != crc:
        raise DataFormatError("dataset checksum mismatch; file is corrupted")
    table = np.frombuffer(blob[HEADER_BYTES:-TRAILER_BYTES], "<f4").reshape(
        n, bands + 2
    )
    feats = table[:, :bands].copy()
    label_col = table[:, bands].copy()
    domains = table[:, bands + 1].astype(np.uint8)
    hidden = bool(flags & FLAG_HIDDEN_LABELS)
    prov_hex = "" if prov == b"\x00" * 32 else prov.hex()
    return Dataset(features=feats,
                   labels=None if hidden else label_col,
                   domains=domains,
                   provenance=prov_hex,
                   hidden_labels=label_col if hidden else None)


def export_csv(ds: Dataset, path) -> None:
    """Plain-text dump for inspection; includes the label column either way."""
    label_col = ds.hidden_labels if ds.labels_hidden else ds.labels
    cols = [f"band_{b:02d}" for b in range(ds.bands)] + ["oxygenation", "domain"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            row = [f"{v:.8g}" for v in ds.features[i]]
            row.append(f"{label_col[i]:.8g}")
            row.append(str(int(ds.domains[i])))
            f.write(",".join(row) + "\n")
