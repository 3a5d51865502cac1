"""Command-line entry points: ``pactrecon <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object of parameters, or a
manifest written by an earlier run); explicit flags override file values.
Lengths are given in millimetres and sampling rates in MHz on the command
line and converted to SI units here.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import dav as dav_mod
from . import operator as op
from . import recon
from .errors import FormatError, PactError, UsageError
from .geometry import ImagingGeometry, desk_geometry, make_half_ring_geometry
from .metrics import MetricReport, evaluate_method

log = logging.getLogger("pactrecon")

EXIT_IO = 3

GEOMETRY_DEFAULTS = {
    "geometry": None,
    "grid": 64,
    "detectors": 32,
    "span_deg": 180.0,
    "start_angle_deg": 0.0,
    "radius_mm": 19.0,
    "roi_mm": 26.95,
    "sampling_mhz": None,
    "sound_speed": 1500.0,
    "calibrate": True,
}

METHOD_DEFAULTS = {
    "method": "tv",
    "step": 2.0,
    "alpha": 0.04,
    "eps": 1e-3,
    "iters": 20,
    "nonneg": False,
    "model": None,
    "matrix_cache": None,
}

DEFAULTS = {
    "phantom": {"n": 1, "grid": 64, "seed": None, "out": None, "masks": None, "n_trees": 3, "depth": 3},
    "dataset": {
        **GEOMETRY_DEFAULTS,
        "n": 220, "n_test": 20, "seed": None, "out": None, "masks": None, "noise": 0.01,
        "fine_factor": 2, "n_trees": 3, "depth": 3, "matrix_cache": None,
    },
    "recon": {
        **METHOD_DEFAULTS,
        **GEOMETRY_DEFAULTS,
        "dataset": None, "sinogram": None, "truth": None, "split": "test", "out": None,
        "emit_iterates": False,
    },
    "train": {
        "dataset": None, "out": None, "log": None, "seed": None, "imax": 3, "epochs": 40,
        "lr": 4e-4, "batch": 32, "width": 32, "depth": 5, "omega_init": 1.0, "matrix_cache": None,
    },
    "eval": {
        **METHOD_DEFAULTS,
        "dataset": None, "methods": "ubp,tv", "split": "test", "out": None,
    },
    "export": {"image": None, "out": None},
}

# keys that never influence outputs and stay out of manifests
_RUNTIME_KEYS = {"config", "threads", "verbose", "command", "matrix_cache"}
_STOCHASTIC = {"phantom", "dataset", "train"}


# -- helpers ---------------------------------------------------------------------


def derive_seed(seed: int, tag: str) -> int:
    """Sub-seed for one consumer of randomness, fixed by ``(seed, tag)``."""
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"config {path} must hold a JSON object")
    if "params" in cfg and isinstance(cfg["params"], dict):
        cfg = cfg["params"]
    return cfg


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults < config file < explicit flags."""
    params = dict(DEFAULTS[command])
    cfg = _load_config(args.config)
    unknown = set(cfg) - set(params)
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {sorted(unknown)}")
    params.update(cfg)
    for key in params:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    if command in _STOCHASTIC and params.get("seed") is None:
        raise UsageError(f"'{command}' is stochastic and needs --seed")
    if params.get("out") is None:
        raise UsageError("--out is required")
    return params


def write_manifest(path, command: str, params: dict, outputs: list) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "params": {k: v for k, v in params.items() if k not in _RUNTIME_KEYS},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def geometry_from_params(params: dict) -> ImagingGeometry:
    g = params.get("geometry")
    if isinstance(g, dict):
        return ImagingGeometry.from_dict(g)
    if isinstance(g, str):
        try:
            return ImagingGeometry.from_json(Path(g).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read geometry {g}: {exc}") from None
    n = int(params["grid"])
    if n < 8:
        raise UsageError("--grid must be >= 8")
    acq = {"sound_speed": float(params["sound_speed"])}
    if params.get("sampling_mhz"):
        acq["sample_period"] = 1.0 / (float(params["sampling_mhz"]) * 1e6)
    roi = float(params["roi_mm"]) * 1e-3
    geo = make_half_ring_geometry(
        int(params["detectors"]), float(params["radius_mm"]) * 1e-3, (0.0, 0.0),
        float(params["span_deg"]), float(params["start_angle_deg"]),
        grid_spec={"nx": n, "ny": n, "pixel_size": roi / n}, acquisition_spec=acq,
    )
    if params.get("calibrate"):
        geo = op.calibrate_amplitude(geo)
    return geo


def system_matrix(geometry: ImagingGeometry, cache=None) -> op.SystemMatrix:
    """Build the operator, or reuse a PASM cache file written for the same geometry."""
    if cache and os.path.exists(cache):
        return op.load_system_matrix(cache, geometry)
    A = op.build_system_matrix(geometry)
    if cache:
        op.save_system_matrix(A, cache)
    return A


def _mkdir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _phantom_stack(params: dict, n: int, shape, seed: int) -> np.ndarray:
    if n < 1:
        raise UsageError("--n must be >= 1")
    masks = params.get("masks")
    if masks:
        if isinstance(masks, str):
            masks = [masks]
        src = [data_mod.load_mask_image(m) for m in masks]
        seeds = np.random.SeedSequence(derive_seed(seed, "augment")).generate_state(n)
        return np.stack([data_mod.augment_mask(src[i % len(src)], int(s), out_shape=shape)
                         for i, s in enumerate(seeds)])
    return data_mod.make_phantoms(n, shape, derive_seed(seed, "phantoms"),
                                  n_trees=int(params["n_trees"]), depth=int(params["depth"]))


# -- commands --------------------------------------------------------------------


def cmd_phantom(params: dict) -> list:
    n = int(params["n"])
    grid = int(params["grid"])
    stack = _phantom_stack(params, n, (grid, grid), int(params["seed"]))
    out = _mkdir(params["out"])
    files = []
    for i, p in enumerate(stack):
        path = out / f"phantom_{i:04d}.npy"
        np.save(path, p)
        files.append(path)
    return files


def cmd_dataset(params: dict) -> list:
    n = int(params["n"])
    if n < 1:
        raise UsageError("--n must be >= 1")
    seed = int(params["seed"])
    geo = geometry_from_params(params)
    phantoms = _phantom_stack(params, n, geo.image_shape, seed)
    ds = data_mod.synthesize_dataset(geo, phantoms, float(params["noise"]), int(params["fine_factor"]),
                                     derive_seed(seed, "synthesis"), int(params["n_test"]))
    out = Path(params["out"])
    if out.parent != Path(""):
        _mkdir(out.parent)
    data_mod.save_dataset(ds, out)
    log.info("wrote %d samples (%d test) to %s", len(ds), len(ds.test_indices()), out)
    return [out]


def _method_reconstructor(params: dict, geo: ImagingGeometry, A, model=None, emit_iterates=False):
    method = params["method"]
    if method == "ubp":
        return lambda b: recon.ubp_reconstruct(geo, b)
    if method == "tv":
        tv = recon.TvParams(step=float(params["step"]), alpha=float(params["alpha"]), eps=float(params["eps"]),
                            n_iters=int(params["iters"]), nonneg=bool(params["nonneg"]))
        return lambda b: recon.tv_gd_reconstruct(A, b, tv)
    if method == "ista":
        ip = recon.IstaParams(step=float(params["step"]), alpha=float(params["alpha"]), n_iters=int(params["iters"]))
        return lambda b: recon.ista_l1_reconstruct(A, b, ip)
    if method == "dav":
        if model is None:
            raise UsageError("method 'dav' needs --model")
        if emit_iterates:
            return lambda b: dav_mod.dav_reconstruct(model, A, b, return_iterates=True)
        return lambda b: dav_mod.dav_reconstruct(model, A, b)
    raise UsageError(f"unknown method {method!r} (choose ubp, tv, ista or dav)")


def _load_model_param(params: dict):
    if not params.get("model"):
        return None
    try:
        return dav_mod.load_model(params["model"])
    except OSError as exc:
        raise FormatError(f"cannot read model {params['model']}: {exc}") from None


def _select(ds: data_mod.Dataset, split: str):
    if split == "test":
        return ds.test_indices()
    if split == "train":
        return ds.train_indices()
    if split == "all":
        return np.arange(len(ds))
    raise UsageError("--split must be test, train or all")


def cmd_recon(params: dict) -> list:
    if params["method"] == "dav" and not params.get("model"):
        raise UsageError("method 'dav' needs --model")
    emit = bool(params["emit_iterates"])
    if emit and params["method"] != "dav":
        raise UsageError("--emit-iterates applies to method 'dav' only")
    samples = []
    if params.get("dataset"):
        ds = data_mod.load_dataset(params["dataset"])
        geo = ds.geometry
        for i in _select(ds, params["split"]):
            samples.append((int(i), ds.phantoms[i], ds.sinograms[i]))
    elif params.get("sinogram"):
        geo = geometry_from_params(params)
        try:
            b = np.load(params["sinogram"])
            truth = np.load(params["truth"]) if params.get("truth") else None
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read input: {exc}") from None
        samples.append((0, truth, b))
    else:
        raise UsageError("recon needs --dataset or --sinogram")

    model = _load_model_param(params)
    A = None if params["method"] == "ubp" else system_matrix(geo, params.get("matrix_cache"))
    rec = _method_reconstructor(params, geo, A, model, emit)
    out = _mkdir(params["out"])
    files = []
    report = MetricReport()
    method = params["method"]
    # iteration k means k DAV steps after the A^T b start; classical methods report 0
    first = 0 if emit or method != "dav" else model.i_max
    for sid, gt, b in samples:
        result = rec(b)
        images = result if emit else [result]
        for k, img in enumerate(images):
            name = f"sample_{sid:04d}_iter{k}.npy" if emit else f"sample_{sid:04d}.npy"
            path = out / name
            np.save(path, np.asarray(img, dtype=np.float64))
            files.append(path)
        if gt is not None:
            evaluate_method([(sid, gt, b)], lambda _b, r=result: r, method, first_iteration=first, report=report)
    if report.rows:
        path = out / "metrics.csv"
        report.write_csv(path)
        files.append(path)
    return files


def cmd_train(params: dict) -> list:
    if not params.get("dataset"):
        raise UsageError("train needs --dataset")
    ds = data_mod.load_dataset(params["dataset"])
    A = system_matrix(ds.geometry, params.get("matrix_cache"))
    cfg = dav_mod.TrainConfig(
        epochs=int(params["epochs"]), learning_rate=float(params["lr"]), batch_size=int(params["batch"]),
        seed=derive_seed(int(params["seed"]), "train"), i_max=int(params["imax"]),
        omega_init=float(params["omega_init"]), width=int(params["width"]), depth=int(params["depth"]),
    )
    model = dav_mod.train_dav_layerwise(ds, A, cfg, progress=log.info)
    out = Path(params["out"])
    if out.parent != Path(""):
        _mkdir(out.parent)
    dav_mod.save_model(model, out)
    log_path = Path(params["log"]) if params.get("log") else out.with_name(out.name + ".stages.csv")
    write_stage_log(model, log_path)
    return [out, log_path]


def write_stage_log(model: dav_mod.DavModel, path) -> None:
    rows = {r["iteration"]: r for r in model.training_log.get("stage_metrics", [])}
    losses = model.training_log.get("epoch_losses", [])
    with open(path, "w") as fh:
        fh.write("iteration,omega,final_train_loss,psnr_mean,psnr_std,ssim_mean,ssim_std\n")
        for i, omega in enumerate(model.omegas, start=1):
            r = rows.get(i, {})
            loss = losses[i - 1][-1] if i - 1 < len(losses) and losses[i - 1] else float("nan")
            vals = [r.get(k, float("nan")) for k in ("psnr_mean", "psnr_std", "ssim_mean", "ssim_std")]
            fh.write(",".join([str(i), repr(omega), repr(loss)] + [repr(float(v)) for v in vals]) + "\n")


def cmd_eval(params: dict) -> list:
    if not params.get("dataset"):
        raise UsageError("eval needs --dataset")
    ds = data_mod.load_dataset(params["dataset"])
    idx = _select(ds, params["split"])
    samples = [(int(i), ds.phantoms[i], ds.sinograms[i]) for i in idx]
    methods = [m.strip() for m in str(params["methods"]).split(",") if m.strip()]
    model = _load_model_param(params)
    A = system_matrix(ds.geometry, params.get("matrix_cache"))
    report = MetricReport()
    for m in methods:
        p = dict(params, method=m)
        if m == "dav":
            rec = _method_reconstructor(p, ds.geometry, A, model, emit_iterates=True)
            # iterate 1 is the adjoint initialisation; rows 1..i_max are the DAV iterations
            evaluate_method(samples, lambda b: rec(b)[1:], m, first_iteration=1, report=report)
        else:
            evaluate_method(samples, _method_reconstructor(p, ds.geometry, A), m, report=report)
    out = _mkdir(params["out"])
    report.write_csv(out / "metrics.csv")
    report.write_summary_csv(out / "summary.csv")
    for row in report.summary():
        log.info("%s iter %d: PSNR %.2f +- %.2f  SSIM %.4f +- %.4f", row["method"], row["iteration"],
                 row["psnr_mean"], row["psnr_std"], row["ssim_mean"], row["ssim_std"])
    return [out / "metrics.csv", out / "summary.csv"]


def export_image(img: np.ndarray, path) -> dict:
    """Min-max normalise to 8 bits, write a P5 graymap and return the sidecar record."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise UsageError("export needs a finite 2-D image")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        img8 = np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img8 = np.zeros(img.shape, dtype=np.uint8)
    data_mod.write_pgm(path, img8)
    return {"min": lo, "max": hi, "shape": list(img.shape)}


def import_export(path, sidecar: dict) -> np.ndarray:
    """Invert an export up to 8-bit quantisation."""
    vals, maxval = data_mod.read_pgm(path)
    lo, hi = sidecar["min"], sidecar["max"]
    return lo + vals.astype(np.float64) / maxval * (hi - lo)


def cmd_export(params: dict) -> list:
    if not params.get("image"):
        raise UsageError("export needs an image file")
    try:
        img = np.load(params["image"])
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {params['image']}: {exc}") from None
    out = Path(params["out"])
    side = export_image(img, out)
    side_path = out.with_suffix(".json")
    with open(side_path, "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [out, side_path]


COMMANDS = {
    "phantom": cmd_phantom,
    "dataset": cmd_dataset,
    "recon": cmd_recon,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
}


# -- argument parsing ------------------------------------------------------------


def _bool_flag(p, name, help_):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction,
                   default=None, help=help_)


def _geometry_args(p):
    g = p.add_argument_group("geometry")
    g.add_argument("--geometry", help="geometry JSON file (overrides the options below)")
    g.add_argument("--grid", type=int, help="pixels per side (default 64)")
    g.add_argument("--detectors", type=int, help="number of detectors (default 32)")
    g.add_argument("--span-deg", dest="span_deg", type=float, help="arc span in degrees (default 180)")
    g.add_argument("--start-angle-deg", dest="start_angle_deg", type=float, help="angle of the first detector")
    g.add_argument("--radius-mm", dest="radius_mm", type=float, help="array radius in mm (default 19)")
    g.add_argument("--roi-mm", dest="roi_mm", type=float, help="field of view in mm (default 26.95)")
    g.add_argument("--sampling-mhz", dest="sampling_mhz", type=float,
                   help="sampling rate in MHz (default: half a pixel of travel per sample)")
    g.add_argument("--sound-speed", dest="sound_speed", type=float, help="m/s (default 1500)")
    _bool_flag(g, "calibrate", "scale the operator to unit spectral norm (default on)")


def _method_args(p):
    p.add_argument("--step", type=float, help="step size lambda (default 2)")
    p.add_argument("--alpha", type=float, help="regularisation weight (default 0.04)")
    p.add_argument("--eps", type=float, help="TV smoothing (default 1e-3)")
    p.add_argument("--iters", type=int, help="iterations (default 20)")
    _bool_flag(p, "nonneg", "project TV iterates onto p >= 0")
    p.add_argument("--model", help="DAVM model file (method dav)")
    p.add_argument("--matrix-cache", dest="matrix_cache", help="PASM file to reuse or create")
    p.add_argument("--split", choices=["test", "train", "all"], help="dataset samples to process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pactrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON parameter file or manifest of an earlier run")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write procedural or mask-derived phantoms")
    p.add_argument("--n", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--masks", nargs="+", help="binary PGM vessel masks to augment instead")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("dataset", parents=[common], help="synthesise a PADS dataset")
    _geometry_args(p)
    p.add_argument("--n", type=int, help="number of samples (default 220)")
    p.add_argument("--n-test", dest="n_test", type=int, help="held-out samples (default 20)")
    p.add_argument("--seed", type=int)
    p.add_argument("--masks", nargs="+", help="binary PGM vessel masks to augment instead")
    p.add_argument("--noise", type=float, help="noise std relative to the sinogram peak (default 0.01)")
    p.add_argument("--fine-factor", dest="fine_factor", type=int, help="generation refinement (default 2)")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--matrix-cache", dest="matrix_cache")
    p.add_argument("--out", help="output .pads file")

    p = sub.add_parser("recon", parents=[common], help="reconstruct images")
    _geometry_args(p)
    p.add_argument("--method", choices=["ubp", "tv", "ista", "dav"])
    _method_args(p)
    p.add_argument("--dataset", help="PADS input")
    p.add_argument("--sinogram", help=".npy sinogram input (with --geometry)")
    p.add_argument("--truth", help=".npy ground truth for --sinogram")
    p.add_argument("--emit-iterates", dest="emit_iterates", action="store_const", const=True, default=None,
                   help="write every DAV iterate")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", parents=[common], help="train a DAV model stage by stage")
    p.add_argument("--dataset")
    p.add_argument("--imax", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--omega-init", dest="omega_init", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--matrix-cache", dest="matrix_cache")
    p.add_argument("--log", help="per-stage CSV (default: <out>.stages.csv)")
    p.add_argument("--out", help="output .davm file")

    p = sub.add_parser("eval", parents=[common], help="score methods on a dataset split")
    p.add_argument("--dataset")
    p.add_argument("--methods", help="comma-separated list, e.g. ubp,tv,dav")
    _method_args(p)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("export", parents=[common], help="write an .npy image as an 8-bit PGM")
    p.add_argument("image", nargs="?")
    p.add_argument("--out", help="output .pgm file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        params = resolve(args.command, args)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                outputs = COMMANDS[args.command](params)
        else:
            outputs = COMMANDS[args.command](params)
        if args.command != "export":
            write_manifest(_manifest_path(params["out"]), args.command, params, outputs)
    except PactError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
