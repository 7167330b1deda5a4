"""Command-line front end.

Five subcommands cover the pipeline: ``simulate`` builds labeled spectra
datasets (optionally distorted into a pseudo-real domain), ``train`` fits
one of the four model variants, ``evaluate`` reports regression error or
the lactate fit, ``infer`` turns a frame into a rendered oxygenation map,
and ``bench`` times methods on one shared frame.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .clinical import (
    benchmark_inference,
    calibrate_frame,
    fit_lactate_exponential,
    load_roi_manifest,
    render_oxygenation_map,
    roi_oxygenation,
)
from .config import PipelineConfig, load_config
from .dataset import (
    generate_dataset,
    load_dataset,
    make_pseudo_real,
    random_split,
    save_dataset,
    stratified_split,
)
from .errors import ConfigError, DataError, OximapError
from .network import Network, cnn_spec, fcn_spec, infer_map, load_model, save_model
from .rng import substream
from .spectral import make_camera_model
from .training import train_adversarial, train_regressor
from .unmixing import build_endmembers, unmix_map

VARIANTS = ("fcn", "cnn", "da-fcn", "da-cnn")


def _echo(text: str):
    print(text, file=sys.stderr)


def _write_report(lines, out_path):
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_path:
        Path(out_path).write_text(text)
        _echo(f"report written to {out_path}")


def _specs_for(variant: str, cfg: PipelineConfig):
    shapes = cfg.network
    if variant.endswith("cnn"):
        return cnn_spec(shapes.channels, shapes.kernel, shapes.dropout)
    return fcn_spec(shapes.hidden, shapes.dropout)


def _resolve_method(name: str, cfg: PipelineConfig):
    """A method argument is either the literal 'unmixing' or a model path."""
    if name == "unmixing":
        return build_endmembers(make_camera_model(cfg.camera)), "unmixing"
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    return load_model(path), path.stem


def _so2_map(method, cube, cfg: PipelineConfig):
    """Run one frame through a network or the unmixing baseline."""
    if isinstance(method, Network):
        return infer_map(method, cube), None
    camera = make_camera_model(cfg.camera)
    so2, degenerate = unmix_map(cube, method, correction=camera.correction)
    return so2, degenerate


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    count = args.count if args.count is not None else cfg.dataset.count
    camera = make_camera_model(cfg.camera)
    step = max(1, count // 10)
    stats = {}

    def progress(done, total):
        if done % step == 0 or done == total:
            _echo(f"  {done}/{total} spectra")

    ds = generate_dataset(count, priors=cfg.priors, grid=cfg.grid,
                          transport=cfg.transport, camera=camera,
                          seed=cfg.seed, threads=cfg.threads,
                          progress=progress, stats=stats)
    if args.distort:
        ds = make_pseudo_real(ds, cfg.distortion)
        _echo(f"distorted into pseudo-real domain (seed {cfg.distortion.seed})")
    save_dataset(ds, args.out)
    _echo(f"dropped draws: {stats.get('redraws', 0)}")
    _echo(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    if args.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {args.variant!r}")
    adversarial = args.variant.startswith("da-")
    if adversarial and not args.real:
        raise ConfigError(
            f"variant {args.variant} needs --real with an unlabeled domain dataset"
        )
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    specs = _specs_for(args.variant, cfg)
    sim = load_dataset(args.data)
    if sim.labels is None:
        raise DataError("training data must carry visible labels")
    sim_train, sim_val = stratified_split(sim, cfg.dataset.train_fraction,
                                          cfg.dataset.bins, seed=cfg.seed)
    if adversarial:
        real = load_dataset(args.real)
        real_train, real_val = random_split(real, cfg.dataset.train_fraction,
                                            seed=cfg.seed)
        net, history = train_adversarial(specs, tcfg, sim_train, sim_val,
                                         real_train, real_val, progress=_echo)
    else:
        net, history = train_regressor(specs, tcfg, sim_train, sim_val,
                                       progress=_echo)
    out = Path(args.out)
    save_model(net, out)
    log_path = out.with_suffix(".log")
    log_path.write_text("\n".join(history.lines()) + "\n")
    _echo(f"model written to {out} ({net.parameter_count()} trainable values)")
    _echo(f"history written to {log_path}")
    print(f"best_epoch={history.best_epoch} "
          f"val_loss={history.val_loss[history.best_epoch - 1]:.6f}")
    return 0


def _evaluate_dataset(method, label, data_path, cfg):
    ds = load_dataset(data_path)
    target = ds.labels if ds.labels is not None else ds.hidden_labels
    oracle = "labels" if ds.labels is not None else "hidden_labels"
    if isinstance(method, Network):
        preds = method.predict(ds.features.astype(method.dtype))
        degenerate = 0
    else:
        cube = ds.features.astype(np.float64).reshape(len(ds), 1, ds.bands)
        camera = make_camera_model(cfg.camera)
        so2, mask = unmix_map(cube, method, correction=camera.correction)
        preds = so2.ravel()
        degenerate = int(mask.sum())
    err = preds.astype(np.float64) - target.astype(np.float64)
    lines = [
        f"method {label}",
        f"n {len(ds)}",
        f"oracle {oracle}",
        f"mse {float(np.mean(err ** 2)):.6f}",
        f"mae {float(np.mean(np.abs(err))):.6f}",
    ]
    if degenerate:
        lines.append(f"degenerate_rows {degenerate}")
    return lines


def _evaluate_manifest(method, label, args, cfg):
    cube = np.load(args.frame)
    if cube.ndim != 3:
        raise DataError(f"frame file must hold an (h, w, bands) cube, got {cube.shape}")
    so2, _ = _so2_map(method, cube, cfg)
    rows = load_roi_manifest(args.manifest)
    if args.frame_id is not None:
        rows = [(fid, m) for fid, m in rows if fid == args.frame_id]
        if not rows:
            raise DataError(f"manifest has no rows for frame_id {args.frame_id!r}")
    points = [(roi_oxygenation(so2, m.roi), m.lactate) for _, m in rows]
    fit = fit_lactate_exponential(points)
    lines = [
        f"method {label}",
        f"n_points {fit.n_points}",
        f"a {fit.a:.6f}",
        f"b {fit.b:.6f}",
        f"mae {fit.mae:.6f}",
        f"mae_std {fit.mae_std:.6f}",
        f"r_squared {fit.r_squared:.6f}",
        f"correlation {fit.correlation:.6f}",
    ]
    for o2 in np.linspace(0.0, 1.0, 41):
        lines.append(f"curve {o2:.4f} {float(fit.predict(o2)):.6f}")
    return lines


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    method, label = _resolve_method(args.method, cfg)
    if args.data is not None:
        lines = _evaluate_dataset(method, label, args.data, cfg)
    elif args.frame is not None and args.manifest is not None:
        lines = _evaluate_manifest(method, label, args, cfg)
    else:
        raise ConfigError("evaluate needs --data, or --frame together with --manifest")
    _write_report(lines, args.out)
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    method, label = _resolve_method(args.method, cfg)
    raw = np.load(args.frame)
    degenerate = None
    if raw.ndim == 2 or args.light is not None:
        if args.light is None:
            raise ConfigError("mosaic input needs --light with the reference spectrum")
        dark = np.load(args.dark) if args.dark else 0.0
        frame = calibrate_frame(raw, dark, np.load(args.light))
        cube, degenerate = frame.cube, frame.degenerate
    elif raw.ndim == 3:
        cube = raw
    else:
        raise DataError(f"frame file must be a mosaic or a cube, got shape {raw.shape}")
    so2, unmix_degenerate = _so2_map(method, cube, cfg)
    flagged = np.zeros(so2.shape, bool)
    for mask in (degenerate, unmix_degenerate):
        if mask is not None:
            flagged |= mask
    png_path, sidecar_path = render_oxygenation_map(so2, args.out)
    _echo(f"method {label}; flagged pixels: {int(flagged.sum())}/{flagged.size}")
    print(f"map {png_path}")
    print(f"sidecar {sidecar_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    iterations = args.iterations if args.iterations is not None else cfg.bench.iterations
    camera = make_camera_model(cfg.camera)
    shape = (cfg.bench.frame_height, cfg.bench.frame_width, camera.bands)
    frame = substream(cfg.seed, "bench-frame").uniform(0.05, 0.95, shape)
    seen, methods = set(), []
    for name in args.methods:
        if name not in seen:
            seen.add(name)
            methods.append(_resolve_method(name, cfg))
    lines = ["# method mean_ms std_ms fps iterations threads"]
    for method, label in methods:
        rep = benchmark_inference(method, frame, iterations=iterations,
                                  threads=cfg.threads, label=label)
        _echo(f"{label}: {rep.mean_ms:.2f} ms over {iterations} iterations")
        lines.append(f"{rep.method} {rep.mean_ms:.4f} {rep.std_ms:.4f} "
                     f"{rep.fps:.3f} {rep.iterations} {rep.threads}")
    _write_report(lines, args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI pipeline configuration file")
    shared.add_argument("--seed", type=int, help="override the global seed")
    shared.add_argument("--threads", type=int, help="cap worker threads")

    parser = argparse.ArgumentParser(
        prog="oximap",
        description="simulate, train, evaluate, map and benchmark tissue "
                    "oxygenation estimators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared],
                       help="generate a labeled spectra dataset")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--distort", action="store_true",
                   help="distort into an unlabeled pseudo-real domain")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[shared], help="train a model variant")
    p.add_argument("variant", choices=VARIANTS)
    p.add_argument("--data", required=True, help="labeled dataset file")
    p.add_argument("--real", help="unlabeled domain dataset (da-* variants)")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--epochs", type=int, help="override the configured epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[shared],
                       help="report regression error or the lactate fit")
    p.add_argument("method", help="model file path or 'unmixing'")
    p.add_argument("--data", help="labeled or hidden-label dataset file")
    p.add_argument("--frame", help="(h, w, bands) cube as .npy")
    p.add_argument("--manifest", help="sampling-site CSV")
    p.add_argument("--frame-id", help="restrict manifest rows to one frame")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", parents=[shared],
                       help="map one frame and render it")
    p.add_argument("method", help="model file path or 'unmixing'")
    p.add_argument("--frame", required=True, help="mosaic or cube as .npy")
    p.add_argument("--dark", help="dark reference .npy (with --light)")
    p.add_argument("--light", help="light reference spectrum .npy")
    p.add_argument("--out", required=True, help="output image base path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", parents=[shared],
                       help="time methods on one shared frame")
    p.add_argument("methods", nargs="+", help="model file paths and/or 'unmixing'")
    p.add_argument("--iterations", type=int, help="override configured iterations")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OximapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
