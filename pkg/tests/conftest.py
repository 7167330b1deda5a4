"""Shared fixtures: a fast transport setup and a disk-cached dataset.

The fast grid/transport pair trades voxel resolution and photon count for
speed; labels pick up ~1.4e-3 RMS noise versus the full setup, which is
well inside every tolerance used here.
"""

import hashlib
import sys
from pathlib import Path

import numpy as np
import pytest

from oximap.dataset import generate_dataset, load_dataset, save_dataset
from oximap.spectral import make_camera_model
from oximap.transport import GridSpec, TransportConfig

CACHE_DIR = Path(__file__).parent / "_data_cache"

FAST_GRID = GridSpec(voxel_size_mm=0.025)
FAST_TRANSPORT = TransportConfig(n_photons=150, max_path_mm=8.0)


def fast_dataset(n: int, seed: int = 0, threads: int = 1):
    return generate_dataset(n, grid=FAST_GRID, transport=FAST_TRANSPORT,
                            seed=seed, threads=threads)


@pytest.fixture(scope="session")
def camera():
    return make_camera_model()


@pytest.fixture(scope="session")
def small_dataset():
    """64 simulated samples, enough for split/augment/training plumbing."""
    return fast_dataset(64)


@pytest.fixture(scope="session")
def big_dataset():
    """10^4 simulated samples, cached on disk keyed by the generation setup."""
    key = hashlib.sha256(
        repr((10_000, FAST_GRID, FAST_TRANSPORT, 0)).encode()
    ).hexdigest()[:16]
    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / f"sim-{key}.ds"
    if path.exists():
        return load_dataset(path)
    print(f"\ngenerating the 10^4-sample dataset (cached at {path})", file=sys.stderr)

    def progress(done, total):
        if done % 1000 == 0:
            print(f"  {done}/{total}", file=sys.stderr)

    ds = generate_dataset(10_000, grid=FAST_GRID, transport=FAST_TRANSPORT,
                          seed=0, progress=progress)
    save_dataset(ds, path)
    return ds
