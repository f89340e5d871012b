"""Command-line interface tying the library into reproducible workflows.

Every command echoes its fully resolved configuration into the output
directory, funnels all randomness through a single --seed, and fails fast on a
non-empty output directory unless --overwrite is given. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure, 5 exhaustion.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diffusion, fem, pipeline, surrogate, training
from .context import ConditionedDenoiser, ContextBundle
from .errors import (CheckpointError, ConfigError, DataFormatError, ExhaustionError,
                     NonConvergenceError, NumericalFailureError)
from .formats import read_kv, read_pgm, write_image_grid, write_kv, write_pgm
from .unet import DenoiserConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_EXHAUSTED = 5


def _resolve(args, parser, defaults):
    """Merge defaults < config file < explicit CLI flags into one dict."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = read_kv(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, text in file_cfg.items():
            ref = defaults[key]
            if isinstance(ref, bool):
                resolved[key] = text.lower() in ("1", "true", "yes")
            elif isinstance(ref, int):
                resolved[key] = int(text)
            elif isinstance(ref, float):
                resolved[key] = float(text)
            else:
                resolved[key] = text
    for key in defaults:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _prepare_outdir(outdir, overwrite: bool) -> Path:
    outdir = Path(outdir)
    if outdir.exists() and any(outdir.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {outdir} is not empty (use --overwrite)")
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def _echo_config(outdir: Path, command: str, resolved: dict):
    write_kv(outdir / "config.txt", {"command": command, **resolved})


def _load_target_curve(cfg):
    if cfg["poly"]:
        coeffs = [float(v) for v in cfg["poly"].split(",")]
        if len(coeffs) != 3:
            raise ConfigError("--poly expects 'a,b,c'")
        return ds.eval_polynomial(ds.PolyCoeffs(*coeffs))
    if cfg["target_curve"]:
        path, _, row = cfg["target_curve"].partition(":")
        ids, curves = ds.read_curves_csv(path)
        wanted = int(row) if row else ids[0]
        try:
            return curves[ids.index(wanted)]
        except ValueError:
            raise DataFormatError(f"sample_id {wanted} not present in {path}")
    raise ConfigError("a target behavior is required: --poly or --target-curve")


def _load_topology(path):
    if path is None:
        return None
    path = Path(path)
    if path.suffix == ".pgm":
        image = read_pgm(path)
    elif path.suffix in (".png", ".jpg", ".jpeg"):
        from PIL import Image

        image = np.asarray(Image.open(path).convert("L"))
    else:
        images = ds.load_idx(path)
        image = images[0]
    if image.shape != (28, 28):
        raise DataFormatError(f"topology image must be 28x28, got {image.shape}")
    return image


# -- gen-dataset -------------------------------------------------------------

GEN_DEFAULTS = {
    "images": "", "outdir": "", "split": "train", "count": 0, "offset": 0,
    "subdivision": 2, "newton_tol": 1e-8, "max_newton": 20, "steps": 13,
    "poisson": 0.3, "jobs": 1, "train_manifest": "", "dump_fields": False,
}


def _solve_sample(args):
    index, bitmap, subdivision, poisson, tol, max_newton, steps, dump_dir = args
    field = ds.to_property_field(bitmap, poisson)
    schedule = fem.LoadSchedule(np.linspace(0.0, bitmap.shape[0] / 2.0, steps))
    dump = None
    if dump_dir:
        from .formats import write_field_dump

        def dump(step, mesh, state):
            nx = int(np.sqrt(mesh.n_nodes))
            write_field_dump(Path(dump_dir) / f"sample{index:06d}_step{step:02d}.bin",
                             state.displacements.reshape(nx, nx, 2), step)

    curve = fem.run_uniaxial_extension(field, schedule, subdivision,
                                       newton_tol=tol, max_newton=max_newton,
                                       field_dump=dump)
    return curve.energies


def cmd_gen_dataset(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "gen-dataset", cfg)
    bitmaps = ds.load_idx(cfg["images"])
    start = cfg["offset"]
    stop = start + cfg["count"] if cfg["count"] else len(bitmaps)
    bitmaps = bitmaps[start:stop]
    sample_ids = list(range(start, stop))

    field0 = ds.to_property_field(bitmaps[0], cfg["poisson"])
    mesh0 = fem.build_mesh(field0, cfg["subdivision"])
    print(f"solving {len(bitmaps)} samples at subdivision {cfg['subdivision']} "
          f"({mesh0.n_elements} elements, {mesh0.n_nodes} nodes)", flush=True)

    dump_dir = outdir / "fields" if cfg["dump_fields"] else None
    if dump_dir:
        dump_dir.mkdir(exist_ok=True)
    args = [(sid, bm, cfg["subdivision"], cfg["poisson"], cfg["newton_tol"],
             cfg["max_newton"], cfg["steps"], str(dump_dir) if dump_dir else None)
            for sid, bm in zip(sample_ids, bitmaps)]
    if cfg["jobs"] > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(cfg["jobs"]) as pool:
            energies = pool.map(_solve_sample, args, chunksize=4)
    else:
        energies = [_solve_sample(a) for a in args]
    raw = np.stack(energies)

    if cfg["train_manifest"]:
        constant = ds.read_manifest(cfg["train_manifest"])["normalization_constant"]
    else:
        constant = ds.normalization_constant(raw)
    schedule = np.linspace(0.0, bitmaps.shape[1] / 2.0, cfg["steps"])
    curves = [ds.EnergyCurve(schedule, row / constant, normalized=True) for row in raw]
    ds.write_curves_csv(outdir / "curves.csv", sample_ids, curves)
    ds.write_manifest(
        outdir / "manifest.txt", split=cfg["split"], count=len(curves),
        normalization=constant, poisson=cfg["poisson"], schedule=schedule,
        extra={"subdivision": cfg["subdivision"], "elements": mesh0.n_elements,
               "offset": start},
    )
    print(f"wrote {len(curves)} curves, normalization constant {constant:.6g}")
    return EXIT_OK


# -- train-surrogate ---------------------------------------------------------

SURR_DEFAULTS = {
    "images": "", "curves": "", "outdir": "", "epochs": 200, "batch_size": 256,
    "lr": 1e-3, "val_fraction": 0.1, "seed": 0, "count": 0, "offset": 0,
}


def cmd_train_surrogate(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "train-surrogate", cfg)
    bitmaps = ds.load_idx(cfg["images"])
    sample_ids, curves = ds.read_curves_csv(cfg["curves"])
    images = bitmaps[sample_ids]
    if cfg["count"]:
        images = images[cfg["offset"] : cfg["offset"] + cfg["count"]]
        curves = curves[cfg["offset"] : cfg["offset"] + cfg["count"]]
    config = surrogate.SurrogateTrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        val_fraction=cfg["val_fraction"], seed=cfg["seed"],
    )
    model, log = surrogate.train_surrogate(images, ds.curves_to_matrix(curves), config)
    surrogate.save_surrogate(outdir / "surrogate.pt", model)
    lines = ["epoch,train_mse,val_mse,lr"]
    lines += [f"{r['epoch']},{r['train_mse']:.10g},{r['val_mse']:.10g},{r['lr']:.10g}"
              for r in log]
    (outdir / "epochs.csv").write_text("\n".join(lines) + "\n")
    print(f"final train mse {log[-1]['train_mse']:.3e}, val mse {log[-1]['val_mse']:.3e}")
    return EXIT_OK


# -- train-diffusion ---------------------------------------------------------

DIFF_DEFAULTS = {
    "images": "", "curves": "", "outdir": "", "steps": 50_000, "batch_size": 128,
    "lr": 1e-4, "timesteps": 1000, "drop_prob": 0.1, "seed": 0,
    "use_topology": False, "unconditional": False, "base_channels": 32,
    "checkpoint_every": 1000, "resume": "", "count": 0, "offset": 0, "progress": 0,
}


def cmd_train_diffusion(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "train-diffusion", cfg)
    bitmaps = ds.load_idx(cfg["images"])
    curve_matrix = None
    if not cfg["unconditional"]:
        if not cfg["curves"]:
            raise ConfigError("conditional training needs --curves (or --unconditional)")
        sample_ids, curves = ds.read_curves_csv(cfg["curves"])
        bitmaps = bitmaps[sample_ids]
        curve_matrix = ds.curves_to_matrix(curves)
    if cfg["count"]:
        sl = slice(cfg["offset"], cfg["offset"] + cfg["count"])
        bitmaps = bitmaps[sl]
        curve_matrix = curve_matrix[sl] if curve_matrix is not None else None

    if cfg["resume"]:
        trainer = training.DiffusionTrainer.resume(cfg["resume"], bitmaps, curve_matrix)
        trainer.config.steps = cfg["steps"]
    else:
        config = training.TrainConfig(
            steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
            timesteps=cfg["timesteps"], drop_prob=cfg["drop_prob"], seed=cfg["seed"],
            checkpoint_every=cfg["checkpoint_every"],
        )
        model = ConditionedDenoiser(
            DenoiserConfig(base_channels=cfg["base_channels"]),
            use_curve=not cfg["unconditional"], use_topology=cfg["use_topology"],
        )
        trainer = training.DiffusionTrainer(model, bitmaps, curve_matrix, config)
    trainer.run(checkpoint_path=outdir / "diffusion.pt", log_path=outdir / "loss.csv",
                progress=cfg["progress"] or None)
    print(f"trained to step {trainer.step}")
    return EXIT_OK


# -- design ------------------------------------------------------------------

DESIGN_DEFAULTS = {
    "diffusion_ckpt": "", "surrogate_ckpt": "", "outdir": "", "poly": "",
    "target_curve": "", "topology": "", "mse_limit": 1e-4, "n_accept": 512,
    "max_generated": 16384, "batch_size": 64, "seed": 0, "snapshot_steps": "",
    "validate_k": 0, "manifest": "", "subdivision": 2, "jobs": 1, "png": False,
}


def cmd_design(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "design", cfg)
    model, sched, _, step, _ = training.load_checkpoint(cfg["diffusion_ckpt"])
    surrogate_model = surrogate.load_surrogate(cfg["surrogate_ckpt"])
    target = pipeline.GenerationTarget(
        behavior=_load_target_curve(cfg),
        topology=_load_topology(cfg["topology"] or None),
        mse_limit=cfg["mse_limit"],
        n_accept=cfg["n_accept"],
        max_generated=cfg["max_generated"],
    )
    snapshot_steps = tuple(int(v) for v in cfg["snapshot_steps"].split(",") if v.strip())
    accepted, report, snapshots = pipeline.generate_and_filter(
        model, sched, surrogate_model, target, seed=cfg["seed"],
        batch_size=cfg["batch_size"], cache_dir=outdir / "cache",
        snapshot_steps=snapshot_steps, progress=True,
    )

    report.to_csv(outdir / "report.csv")
    write_kv(outdir / "summary.txt", {**report.summary(), "model_step": step})
    if len(accepted):
        ds.save_idx(outdir / "accepted.idx", accepted)
        for i, image in enumerate(accepted):
            write_pgm(outdir / f"accepted_{i:04d}.pgm", image)
            if cfg["png"]:
                from PIL import Image

                Image.fromarray(image).save(outdir / f"accepted_{i:04d}.png")
    for t_step, grid in snapshots.items():
        write_image_grid(outdir / f"snapshot_t{t_step:04d}.pgm", grid[:, 0])

    if cfg["validate_k"]:
        if not cfg["manifest"]:
            raise ConfigError("--validate-k needs --manifest for the normalization constant")
        manifest = ds.read_manifest(cfg["manifest"])
        rows = pipeline.validate_with_fem(
            accepted, surrogate_model, target.behavior, cfg["validate_k"],
            normalization=manifest["normalization_constant"],
            subdivision=cfg["subdivision"], poisson=manifest["poisson"], jobs=cfg["jobs"],
        )
        pipeline.write_validation_csv(outdir / "validation.csv", rows)
        write_kv(outdir / "validation_summary.txt", pipeline.validation_summary(rows))

    print(f"status {report.status}: accepted {report.accepted_count} "
          f"of {report.generated_count} generated")
    if report.status == "exhausted":
        raise ExhaustionError("generation cap reached without an accepted sample")
    return EXIT_OK


# -- validate ----------------------------------------------------------------

VALIDATE_DEFAULTS = {
    "images": "", "surrogate_ckpt": "", "outdir": "", "poly": "", "target_curve": "",
    "k": 16, "manifest": "", "subdivision": 2, "jobs": 1,
}


def cmd_validate(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "validate", cfg)
    images = ds.load_idx(cfg["images"])
    surrogate_model = surrogate.load_surrogate(cfg["surrogate_ckpt"])
    manifest = ds.read_manifest(cfg["manifest"])
    target = _load_target_curve(cfg)
    rows = pipeline.validate_with_fem(
        images, surrogate_model, target, cfg["k"],
        normalization=manifest["normalization_constant"],
        subdivision=cfg["subdivision"], poisson=manifest["poisson"], jobs=cfg["jobs"],
    )
    pipeline.write_validation_csv(outdir / "validation.csv", rows)
    write_kv(outdir / "validation_summary.txt", pipeline.validation_summary(rows))
    print(f"validated {len(rows)} samples")
    return EXIT_OK


# -- fit-poly ----------------------------------------------------------------

FITPOLY_DEFAULTS = {"curves": "", "outdir": ""}


def cmd_fit_poly(cfg) -> int:
    outdir = _prepare_outdir(cfg["outdir"], cfg["overwrite"])
    _echo_config(outdir, "fit-poly", cfg)
    sample_ids, curves = ds.read_curves_csv(cfg["curves"])
    lines = ["sample_id,a,b,c,rms_residual"]
    coeffs = []
    for sid, curve in zip(sample_ids, curves):
        poly, rms = ds.fit_cubic(curve)
        coeffs.append(poly.as_tuple())
        lines.append(f"{sid},{poly.a:.17g},{poly.b:.17g},{poly.c:.17g},{rms:.17g}")
    (outdir / "coefficients.csv").write_text("\n".join(lines) + "\n")
    arr = np.array(coeffs)
    write_kv(outdir / "ranges.txt", {
        "a_range": [float(arr[:, 0].min()), float(arr[:, 0].max())],
        "b_range": [float(arr[:, 1].min()), float(arr[:, 1].max())],
        "c_range": [float(arr[:, 2].min()), float(arr[:, 2].max())],
        "count": len(coeffs),
    })
    print(f"fitted {len(coeffs)} curves")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="key-value config file; flags override it")
    sub.add_argument("--outdir", help="output directory")
    sub.add_argument("--overwrite", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microdiff",
        description="Generate, train, and inverse-design hyperelastic microstructures.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-dataset", help="solve FEM energy curves for a bitmap set")
    _add_common(p)
    p.add_argument("--images")
    p.add_argument("--split")
    p.add_argument("--count", type=int)
    p.add_argument("--offset", type=int)
    p.add_argument("--subdivision", type=int)
    p.add_argument("--newton-tol", dest="newton_tol", type=float)
    p.add_argument("--max-newton", dest="max_newton", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--poisson", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--dump-fields", dest="dump_fields", action="store_true", default=None)

    p = subs.add_parser("train-surrogate", help="train the energy-curve CNN")
    _add_common(p)
    p.add_argument("--images")
    p.add_argument("--curves")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--offset", type=int)

    p = subs.add_parser("train-diffusion", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--images")
    p.add_argument("--curves")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--drop-prob", dest="drop_prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--use-topology", dest="use_topology", action="store_true", default=None)
    p.add_argument("--unconditional", action="store_true", default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume")
    p.add_argument("--count", type=int)
    p.add_argument("--offset", type=int)
    p.add_argument("--progress", type=int)

    p = subs.add_parser("design", help="generate, filter, and export microstructures")
    _add_common(p)
    p.add_argument("--diffusion-ckpt", dest="diffusion_ckpt")
    p.add_argument("--surrogate-ckpt", dest="surrogate_ckpt")
    p.add_argument("--poly", help="target cubic 'a,b,c' on normalized displacement")
    p.add_argument("--target-curve", dest="target_curve", help="curves.csv[:sample_id]")
    p.add_argument("--topology", help="28x28 grayscale context image (pgm/png/idx)")
    p.add_argument("--mse-limit", dest="mse_limit", type=float)
    p.add_argument("--n-accept", dest="n_accept", type=int)
    p.add_argument("--max-generated", dest="max_generated", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--snapshot-steps", dest="snapshot_steps")
    p.add_argument("--validate-k", dest="validate_k", type=int)
    p.add_argument("--manifest")
    p.add_argument("--subdivision", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--png", action="store_true", default=None)

    p = subs.add_parser("validate", help="FEM re-scoring of generated bitmaps")
    _add_common(p)
    p.add_argument("--images")
    p.add_argument("--surrogate-ckpt", dest="surrogate_ckpt")
    p.add_argument("--poly")
    p.add_argument("--target-curve", dest="target_curve")
    p.add_argument("--k", type=int)
    p.add_argument("--manifest")
    p.add_argument("--subdivision", type=int)
    p.add_argument("--jobs", type=int)

    p = subs.add_parser("fit-poly", help="fit cubics to a curve CSV and report ranges")
    _add_common(p)
    p.add_argument("--curves")

    return parser


COMMANDS = {
    "gen-dataset": (cmd_gen_dataset, GEN_DEFAULTS),
    "train-surrogate": (cmd_train_surrogate, SURR_DEFAULTS),
    "train-diffusion": (cmd_train_diffusion, DIFF_DEFAULTS),
    "design": (cmd_design, DESIGN_DEFAULTS),
    "validate": (cmd_validate, VALIDATE_DEFAULTS),
    "fit-poly": (cmd_fit_poly, FITPOLY_DEFAULTS),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler, defaults = COMMANDS[args.command]
    try:
        cfg = _resolve(args, parser, {**defaults, "overwrite": False})
        if not cfg.get("outdir"):
            raise ConfigError("--outdir is required")
        return handler(cfg)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError, CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailureError, NonConvergenceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ExhaustionError as err:
        print(f"exhausted: {err}", file=sys.stderr)
        return EXIT_EXHAUSTED


if __name__ == "__main__":
    sys.exit(main())
