"""Time the numba kernels against the pure-numpy fallbacks.

Both backends share the photon/pixel counter streams, so results must agree
before a timing is worth reporting; this script checks agreement first and
then prints a small table. Select the process-wide default with
OXIMAP_BACKEND=numpy|numba; here each call passes an explicit override.

    python3 benchmarks/compare_backends.py --photons 20000 --repeats 5
"""

import argparse
import statistics
import time

import numpy as np

from oximap.optics import LayerParams, TissueSample
from oximap.rng import substream
from oximap.spectral import make_camera_model
from oximap.transport import TransportConfig, VoxelGrid, prewarm, simulate_wavelength
from oximap.unmixing import build_endmembers, unmix_map

BACKENDS = ("numba", "numpy")


def _time(fn, repeats):
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1000.0)
    return out


def bench_transport(photons: int, repeats: int, threads: int):
    layer = LayerParams(oxygenation=0.5, blood_volume_fraction=0.02,
                        thickness_mm=1.0, scatter_amplitude=15.0,
                        scatter_power=1.0, anisotropy=0.85, refractive_index=1.4)
    tissue = TissueSample(layers=(layer, layer, layer))
    grid = VoxelGrid.for_tissue(tissue)
    cfg = TransportConfig(n_photons=photons)

    results = {be: simulate_wavelength(tissue, 540.0, grid=grid, config=cfg,
                                       seed=0, backend=be, threads=threads)
               for be in BACKENDS}
    ra, rb = (results[be].reflectance for be in BACKENDS)
    if abs(ra - rb) > 1e-12:
        raise SystemExit(f"backend disagreement: reflectance {ra} vs {rb}")

    return {be: _time(lambda be=be: simulate_wavelength(
        tissue, 540.0, grid=grid, config=cfg, seed=0, backend=be,
        threads=threads), repeats) for be in BACKENDS}


def bench_unmixing(height: int, width: int, repeats: int):
    camera = make_camera_model()
    em = build_endmembers(camera)
    frame = substream(0, "backend-bench").uniform(
        0.05, 0.95, (height, width, camera.band_centers_nm.size))

    maps = {be: unmix_map(frame, em, backend=be)[0] for be in BACKENDS}
    if not np.allclose(maps["numba"], maps["numpy"], atol=1e-9):
        raise SystemExit("backend disagreement in the unmixing map")

    return {be: _time(lambda be=be: unmix_map(frame, em, backend=be), repeats)
            for be in BACKENDS}


def report(name: str, timings: dict):
    base = statistics.mean(timings["numpy"])
    for be in BACKENDS:
        vals = timings[be]
        mean = statistics.mean(vals)
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        speedup = base / mean
        print(f"{name:<22} {be:<6} {mean:10.2f} {std:8.2f} {speedup:7.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--photons", type=int, default=20_000,
                    help="photons per transport run (default 20000)")
    ap.add_argument("--frame", default="256x136",
                    help="unmixing frame as HxW (default 256x136)")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    h, w = (int(v) for v in args.frame.lower().split("x"))

    prewarm("numba")
    print(f"# kernel                backend   mean_ms   std_ms  vs numpy "
          f"(repeats={args.repeats}, threads={args.threads})")
    report(f"transport {args.photons}ph", bench_transport(args.photons,
                                                          args.repeats,
                                                          args.threads))
    report(f"unmix_map {h}x{w}", bench_unmixing(h, w, args.repeats))


if __name__ == "__main__":
    main()
