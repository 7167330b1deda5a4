"""INI-backed configuration shared by the command-line pipeline.

One file describes every stage: tissue priors, voxel grid, photon
transport, camera, dataset sizes and splits, the pseudo-real distortion,
network shapes, training hyperparameters, and benchmark settings.  A
single global seed fans out to named substreams so stages can be re-run
in isolation and still reproduce.  Unknown sections or keys are hard
errors; referenced files must exist at parse time.
"""

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .dataset import DistortionSpec
from .errors import ConfigError
from .optics import DEFAULT_PRIOR_RANGES, PriorConfig
from .spectral import CameraConfig
from .training import TrainConfig
from .transport import GridSpec, TransportConfig

_PRIOR_FIELDS = tuple(DEFAULT_PRIOR_RANGES)
_LAYERS = 3


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 1000
    train_fraction: float = 0.8
    bins: int = 10

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"dataset count must be at least 1, got {self.count}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.bins < 1:
            raise ConfigError("bins must be at least 1")


@dataclass(frozen=True)
class NetworkShapes:
    """Widths shared by the model variants; the variant itself is a CLI arg."""

    hidden: Tuple[int, ...] = (64, 128, 256)
    channels: Tuple[int, ...] = (16, 32)
    kernel: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise ConfigError("hidden widths must be positive integers")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive integers")
        if self.kernel < 1:
            raise ConfigError("kernel must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class BenchConfig:
    frame_height: int = 512
    frame_width: int = 272
    iterations: int = 1000

    def __post_init__(self):
        if self.frame_height < 1 or self.frame_width < 1:
            raise ConfigError("benchmark frame dimensions must be positive")
        if self.iterations < 1:
            raise ConfigError("benchmark iterations must be at least 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    priors: PriorConfig = dataclasses.field(default_factory=PriorConfig)
    grid: GridSpec = dataclasses.field(default_factory=GridSpec)
    transport: TransportConfig = dataclasses.field(default_factory=TransportConfig)
    camera: CameraConfig = dataclasses.field(default_factory=CameraConfig)
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    distortion: DistortionSpec = dataclasses.field(default_factory=DistortionSpec)
    network: NetworkShapes = dataclasses.field(default_factory=NetworkShapes)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    bench: BenchConfig = dataclasses.field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")


def _parse_int(key, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {text!r}") from None


def _parse_float(key, text) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {text!r}") from None


def _parse_opt_float(key, text) -> Optional[float]:
    if text.strip().lower() in ("none", "off", ""):
        return None
    return _parse_float(key, text)


def _parse_pair(key, text) -> Tuple[float, float]:
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise ConfigError(f"{key} must be two numbers 'lo hi', got {text!r}")
    return _parse_float(key, parts[0]), _parse_float(key, parts[1])


def _parse_ints(key, text) -> Tuple[int, ...]:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{key} must list at least one integer")
    return tuple(_parse_int(key, p) for p in parts)


def _take(section: dict, name: str):
    """Remove and return one key so leftovers can be flagged as unknown."""
    return section.pop(name, None)


def _reject_unknown(section_name: str, leftovers: dict):
    if leftovers:
        raise ConfigError(
            f"unknown key(s) in [{section_name}]: {', '.join(sorted(leftovers))}"
        )


def _build_priors(items: dict) -> PriorConfig:
    ranges = dict(DEFAULT_PRIOR_RANGES)
    overrides = [dict() for _ in range(_LAYERS)]
    for key, text in items.items():
        target, name = ranges, key
        if key.startswith("layer") and "." in key:
            head, name = key.split(".", 1)
            idx = _parse_int(key, head[len("layer"):])
            if not 0 <= idx < _LAYERS:
                raise ConfigError(f"layer index out of range in [prior] {key}")
            target = overrides[idx]
        if name not in _PRIOR_FIELDS:
            raise ConfigError(f"unknown key(s) in [prior]: {key}")
        target[name] = _parse_pair(key, text)
    return PriorConfig(ranges=ranges, layer_overrides=tuple(overrides))


def _build_wavelengths(lo: float, hi: float, step: float) -> np.ndarray:
    if not (lo < hi and step > 0):
        raise ConfigError("wavelength grid needs lo < hi and a positive step")
    return np.arange(lo, hi + step / 2, step)


def _resolve_csv(key, text, base: Path) -> Optional[str]:
    if text is None or not text.strip():
        return None
    path = Path(text.strip())
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise ConfigError(f"{key} references a missing file: {path}")
    return str(path)


def _build_camera(items: dict, base: Path) -> CameraConfig:
    kwargs = {}
    for name, conv in (("bands", _parse_int), ("fwhm_nm", _parse_float),
                       ("center_min_nm", _parse_float),
                       ("center_max_nm", _parse_float)):
        text = _take(items, name)
        if text is not None:
            kwargs[name] = conv(name, text)
    lo = _take(items, "wavelength_min_nm")
    hi = _take(items, "wavelength_max_nm")
    step = _take(items, "wavelength_step_nm")
    if any(v is not None for v in (lo, hi, step)):
        if any(v is None for v in (lo, hi, step)):
            raise ConfigError(
                "wavelength_min_nm, wavelength_max_nm and wavelength_step_nm "
                "must be given together"
            )
        kwargs["wavelengths"] = _build_wavelengths(
            _parse_float("wavelength_min_nm", lo),
            _parse_float("wavelength_max_nm", hi),
            _parse_float("wavelength_step_nm", step),
        )
    for name in ("response_csv", "light_source_csv", "transmission_csv",
                 "correction_csv"):
        text = _take(items, name)
        if text is not None:
            kwargs[name] = _resolve_csv(name, text, base)
    _reject_unknown("camera", items)
    return CameraConfig(**kwargs)


def _build_simple(cls, section_name: str, items: dict, converters: dict):
    kwargs = {}
    for name, conv in converters.items():
        text = _take(items, name)
        if text is not None:
            kwargs[name] = conv(name, text)
    _reject_unknown(section_name, items)
    return cls(**kwargs)


def default_config() -> PipelineConfig:
    return PipelineConfig()


def load_config(path=None, seed: Optional[int] = None,
                threads: Optional[int] = None) -> PipelineConfig:
    """Parse an INI file into a PipelineConfig; None gives pure defaults.

    ``seed`` and ``threads`` override the file (the CLI wires its flags
    here).  Relative CSV paths resolve against the config file's folder.
    The training seed always equals the global seed.
    """
    sections = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        base = path.parent
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        sections = {name: dict(cp[name]) for name in cp.sections()}

    pipeline = sections.pop("pipeline", {})
    cfg_seed = _parse_int("seed", _take(pipeline, "seed") or "0")
    cfg_threads = _parse_int("threads", _take(pipeline, "threads") or "1")
    _reject_unknown("pipeline", pipeline)
    if seed is not None:
        cfg_seed = seed
    if threads is not None:
        cfg_threads = threads

    priors = _build_priors(sections.pop("prior", {}))
    grid = _build_simple(GridSpec, "grid", sections.pop("grid", {}), {
        "nx": _parse_int, "ny": _parse_int, "voxel_size_mm": _parse_float,
    })
    transport = _build_simple(
        TransportConfig, "transport", sections.pop("transport", {}), {
            "n_photons": _parse_int,
            "roulette_threshold": _parse_float,
            "roulette_survival": _parse_float,
            "max_path_mm": _parse_float,
            "lateral": lambda k, t: t.strip(),
        })
    camera = _build_camera(sections.pop("camera", {}), base)
    dataset = _build_simple(DatasetConfig, "dataset", sections.pop("dataset", {}), {
        "count": _parse_int, "train_fraction": _parse_float, "bins": _parse_int,
    })
    distortion_items = sections.pop("distortion", {})
    had_distortion_seed = "seed" in distortion_items
    distortion = _build_simple(
        DistortionSpec, "distortion", distortion_items, {
            "seed": _parse_int,
            "drift_amplitude": _parse_float,
            "jitter_amplitude": _parse_float,
            "crosstalk": _parse_float,
            "snr_db": _parse_opt_float,
        })
    if not had_distortion_seed:
        # fan the one global seed out unless the file pins its own
        distortion = dataclasses.replace(distortion, seed=cfg_seed)
    network = _build_simple(NetworkShapes, "network", sections.pop("network", {}), {
        "hidden": _parse_ints, "channels": _parse_ints,
        "kernel": _parse_int, "dropout": _parse_float,
    })
    train = _build_simple(TrainConfig, "train", sections.pop("train", {}), {
        "lr_generator": _parse_float,
        "lr_discriminator": _parse_float,
        "adversarial_weight": _parse_float,
        "weight_decay": _parse_float,
        "batch": _parse_int,
        "epochs": _parse_int,
        "scheduler_factor": _parse_float,
        "scheduler_patience": _parse_int,
        "scheduler_threshold": _parse_float,
        "snr_db": _parse_opt_float,
    })
    # the training stream is a substream of the one global seed, not its own key
    train = dataclasses.replace(train, seed=cfg_seed)
    bench = _build_simple(BenchConfig, "bench", sections.pop("bench", {}), {
        "frame_height": _parse_int, "frame_width": _parse_int,
        "iterations": _parse_int,
    })
    if sections:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(sections))}")
    return PipelineConfig(
        seed=cfg_seed, threads=cfg_threads, priors=priors, grid=grid,
        transport=transport, camera=camera, dataset=dataset,
        distortion=distortion, network=network, train=train, bench=bench,
    )
