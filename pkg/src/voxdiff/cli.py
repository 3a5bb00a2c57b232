"""Command-line surface tying the pipeline stages together.

Every subcommand reads an optional RunConfig TOML file plus flag overrides,
runs one stage, and writes a run-record JSON (resolved config + digest, seed,
wall time, version string) next to its outputs so any run can be reproduced
from its record. Validation failures exit 2 before any work starts; runtime
failures exit 1 with the message on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

import voxdiff
from voxdiff.autoencoder import (
    compute_scale_factor,
    encode,
    load_autoencoder,
    save_autoencoder,
    train_autoencoder,
)
from voxdiff.config import ConfigError, RunConfig, default_config
from voxdiff.dataset import (
    DatasetManifest,
    ManifestEntry,
    build_procedural_dataset,
    build_shape,
    load_manifest,
    save_manifest,
)
from voxdiff.evaluation import (
    CategoryProbabilityScorer,
    MetricsReport,
    accuracy,
    load_classifier,
    save_classifier,
    score_text_shape,
    tmd,
    train_toy_classifier,
)
from voxdiff.evaluation import iou as iou_metric
from voxdiff.geometry import extract_isosurface, load_vsdf, save_obj, save_vsdf, to_occupancy
from voxdiff.tasks import (
    GenerationRequest,
    complete_shape,
    generate,
    load_diffusion,
    load_mask,
    manipulate_shape,
    mask_preset,
    save_diffusion,
    train_diffusion,
)

RUN_RECORD_VERSION = 1


def _describe_version() -> str:
    """git-describe when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True,
            text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{voxdiff.__version__}"


def _write_run_record(out_dir, command: str, argv, cfg: RunConfig | None,
                      seed, started: float, outputs) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "format_version": RUN_RECORD_VERSION,
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict() if cfg is not None else None,
        "config_digest": cfg.digest() if cfg is not None else None,
        "seed": seed,
        "started_utc": datetime.datetime.fromtimestamp(
            started, datetime.timezone.utc).isoformat(),
        "wall_seconds": round(time.time() - started, 3),
        "version": _describe_version(),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / f"run-record-{command}.json"
    path.write_text(json.dumps(record, indent=2))
    return path


def _load_config(args, overrides: dict) -> RunConfig:
    overrides = {section: {k: v for k, v in values.items() if v is not None}
                 for section, values in overrides.items()}
    overrides = {s: v for s, v in overrides.items() if v}
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, overrides)
    base = default_config(getattr(args, "preset", None) or "desk")
    for section, values in overrides.items():
        base[section].update(values)
    return RunConfig.from_dict(base)


def _train_split(manifest: DatasetManifest) -> DatasetManifest:
    subset = manifest.subset("train")
    if not len(subset):
        raise RuntimeError("manifest has no train-split entries")
    return subset


# -- subcommand implementations -------------------------------------------------


def _cmd_dataset_build(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {
        "dataset": {"n_shapes": args.n, "seed": args.seed,
                    "categories": args.categories.split(",") if args.categories else None},
        "geometry": {"resolution": args.resolution},
    })
    ds = cfg["dataset"]
    manifest = build_procedural_dataset(ds["n_shapes"], tuple(ds["categories"]),
                                        cfg.resolution, ds["seed"], args.out)
    outputs = ["manifest.jsonl"] + [e.file for e in manifest.entries]
    _write_run_record(args.out, "dataset-build", argv, cfg, ds["seed"],
                      started, outputs)
    print(f"dataset: {len(manifest.entries)} shapes at D={cfg.resolution} "
          f"-> {args.out}")
    return 0


def _cmd_voxelize(args, argv) -> int:
    started = time.time()
    manifest = load_manifest(args.manifest)
    resolution = args.resolution
    if resolution < 1:
        raise ConfigError("--resolution must be >= 1")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.entries:
        if entry.params is None:
            raise RuntimeError(
                f"entry {entry.index} has no shape parameters to re-voxelize")
        grid = build_shape(entry.params, resolution)
        save_vsdf(grid, out_dir / entry.file)
        entries.append(ManifestEntry(
            index=entry.index, file=entry.file, category=entry.category,
            captions=entry.captions, split=entry.split, params=entry.params))
    new_manifest = DatasetManifest(resolution=resolution, seed=manifest.seed,
                                   entries=tuple(entries), root=out_dir)
    save_manifest(new_manifest, out_dir / "manifest.jsonl")
    _write_run_record(args.out, "voxelize", argv, None, manifest.seed, started,
                      ["manifest.jsonl"] + [e.file for e in entries])
    print(f"voxelize: {len(entries)} shapes re-sampled at D={resolution}")
    return 0


def _cmd_train_ae(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {
        "autoencoder": {"epochs": args.epochs, "batch_size": args.batch_size,
                        "learning_rate": args.learning_rate, "seed": args.seed,
                        "enc_width": args.width, "dec_width": args.width},
    })
    manifest = load_manifest(args.manifest)
    if manifest.resolution != cfg.resolution:
        raise RuntimeError(
            f"dataset resolution {manifest.resolution} does not match config "
            f"geometry.resolution {cfg.resolution}")
    train = _train_split(manifest)
    grids = train.load_all()
    training = cfg.ae_training_config()
    params, log = train_autoencoder(grids, cfg.autoencoder_config(), training,
                                    log_fn=print)
    save_autoencoder(args.out, params, seed=training.seed,
                     epoch=training.epochs, loss_curve=log)
    _write_run_record(args.out, "train-ae", argv, cfg, training.seed, started,
                      ["manifest.json", "weights.npz"])
    print(f"train-ae: final recon {log['recon'][-1]:.5f} -> {args.out}")
    return 0


def _cmd_calibrate_scale(args, argv) -> int:
    started = time.time()
    params, meta = load_autoencoder(args.ae)
    manifest = load_manifest(args.manifest)
    train = _train_split(manifest)
    factor = compute_scale_factor(train.load_all(), params,
                                  max_shapes=args.max_shapes)
    params.scale_factor = factor
    save_autoencoder(args.ae, params, seed=meta.get("seed", 0),
                     epoch=meta.get("epoch", 0),
                     loss_curve=meta.get("loss_curve"))
    _write_run_record(args.ae, "calibrate-scale", argv, None,
                      meta.get("seed", 0), started,
                      ["manifest.json", "weights.npz"])
    print(f"calibrate-scale: factor {factor:.6f} stored in {args.ae}")
    return 0


def _cmd_train_diffusion(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {
        "diffusion_training": {"epochs": args.epochs, "batch_size": args.batch_size,
                               "learning_rate": args.learning_rate,
                               "seed": args.seed},
        "denoiser": {"base_width": args.base_width},
    })
    params, _ = load_autoencoder(args.ae)
    if params.scale_factor is None:
        raise RuntimeError(
            f"autoencoder at {args.ae} is not calibrated; run calibrate-scale first")
    if params.config.latent_side != cfg.latent_side:
        raise RuntimeError(
            f"autoencoder latent side {params.config.latent_side} does not match "
            f"config latent side {cfg.latent_side}")
    manifest = load_manifest(args.manifest)
    train = _train_split(manifest)
    fields, captions = [], []
    for entry in train.entries:
        grid = train.load_grid(entry)
        fields.append(encode(grid, params))
        captions.append(entry.caption)
    dn_cfg = cfg.denoiser_config(plain_unet=args.plain_unet)
    training = cfg.diffusion_training_config()
    ckpt, log = train_diffusion(
        fields, captions, dn_cfg, training,
        schedule_params=cfg.schedule_params(),
        scale_factor=params.scale_factor,
        max_caption_words=cfg.max_caption_words(), log_fn=print)
    save_diffusion(args.out, ckpt, seed=training.seed, epoch=training.epochs,
                   loss_curve=log)
    _write_run_record(args.out, "train-diffusion", argv, cfg, training.seed,
                      started, ["manifest.json", "weights.npz"])
    print(f"train-diffusion: final loss {log['loss'][-1]:.5f} -> {args.out}")
    return 0


def _sampler_overrides(args) -> dict:
    return {k: v for k, v in {
        "sampler": getattr(args, "sampler", None),
        "num_steps": getattr(args, "steps", None),
        "eta": getattr(args, "eta", None),
        "guidance_scale": getattr(args, "guidance", None),
    }.items() if v is not None}


def _cmd_generate(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {"sampler": _sampler_overrides(args)})
    params, _ = load_autoencoder(args.ae)
    ckpt, _ = load_diffusion(args.diffusion)
    req = GenerationRequest(caption=args.caption, k=args.k,
                            settings=cfg.sampler_settings(), seed=args.seed)
    grids = generate(req, params, ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, grid in enumerate(grids):
        name = f"sample_{i:03d}.vsdf"
        save_vsdf(grid, out_dir / name)
        outputs.append(name)
    _write_run_record(args.out, "generate", argv, cfg, args.seed, started, outputs)
    print(f"generate: {len(outputs)} samples for {args.caption!r} -> {args.out}")
    return 0


def _cmd_complete(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {"sampler": _sampler_overrides(args)})
    params, _ = load_autoencoder(args.ae)
    ckpt, _ = load_diffusion(args.diffusion)
    partial = load_vsdf(args.input)
    if args.mask:
        mask = load_mask(args.mask)
    else:
        mask = mask_preset(args.mask_preset, params.config.resolution,
                           params.config.patch_size)
    grid = complete_shape(partial, mask, args.caption, params, ckpt,
                          settings=cfg.sampler_settings(), seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_vsdf(grid, out_dir / "completed.vsdf")
    _write_run_record(args.out, "complete", argv, cfg, args.seed, started,
                      ["completed.vsdf"])
    print(f"complete: {args.input} -> {out_dir / 'completed.vsdf'}")
    return 0


def _cmd_manipulate(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {"sampler": _sampler_overrides(args)})
    params, _ = load_autoencoder(args.ae)
    ckpt, _ = load_diffusion(args.diffusion)
    init = load_vsdf(args.input)
    grid = manipulate_shape(init, args.caption, args.t_mid, params, ckpt,
                            settings=cfg.sampler_settings(), seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_vsdf(grid, out_dir / "manipulated.vsdf")
    _write_run_record(args.out, "manipulate", argv, cfg, args.seed, started,
                      ["manipulated.vsdf"])
    print(f"manipulate: t_mid={args.t_mid} {args.input} "
          f"-> {out_dir / 'manipulated.vsdf'}")
    return 0


def _cmd_export_mesh(args, argv) -> int:
    started = time.time()
    grid = load_vsdf(args.input)
    mesh = extract_isosurface(grid, iso=args.iso)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_obj(mesh, out_path)
    _write_run_record(out_path.parent, "export-mesh", argv, None, None, started,
                      [out_path.name])
    print(f"export-mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces "
          f"-> {out_path}")
    return 0


def _cmd_eval(args, argv) -> int:
    started = time.time()
    cfg = _load_config(args, {})
    shape_dir = Path(args.shapes)
    files = sorted(shape_dir.glob("*.vsdf"))
    if not files:
        raise RuntimeError(f"no .vsdf files found in {shape_dir}")
    grids = [load_vsdf(p) for p in files]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    classifier = None
    if args.classifier and (Path(args.classifier) / "manifest.json").exists():
        classifier = load_classifier(args.classifier)
    elif args.manifest:
        manifest = load_manifest(args.manifest)
        pairs = [(to_occupancy(manifest.load_grid(e), manifest.resolution).bits,
                  e.category) for e in manifest.entries]
        classifier = train_toy_classifier(pairs, sorted(set(manifest.categories())),
                                          seed=cfg["dataset"]["seed"])
        target = Path(args.classifier) if args.classifier else out_dir / "classifier"
        save_classifier(target, classifier)
        print(f"eval: trained classifier "
              f"(holdout acc {classifier.holdout_accuracy:.1f}%) -> {target}")

    acc = None
    scorer_value = None
    per_sample = []
    if args.intended:
        if classifier is None:
            raise RuntimeError(
                "--intended needs a classifier: pass --classifier or --manifest")
        acc = accuracy(grids, [args.intended] * len(grids), classifier)
        scorer = CategoryProbabilityScorer(classifier)
        scores = [score_text_shape(scorer, g, f"a {args.intended}") for g in grids]
        scorer_value = float(np.mean(scores))
        per_sample = [{"file": p.name, "category_probability": s}
                      for p, s in zip(files, scores)]

    iou_mean = None
    if args.reference:
        ref_files = sorted(Path(args.reference).glob("*.vsdf"))
        if len(ref_files) != len(files):
            raise RuntimeError(
                f"{len(files)} shapes vs {len(ref_files)} reference shapes")
        pairs = [iou_metric(g.values < 0, load_vsdf(r).values < 0)
                 for g, r in zip(grids, ref_files)]
        iou_mean = float(np.mean(pairs))

    report = MetricsReport(
        iou_mean=iou_mean, acc=acc,
        tmd=tmd([g.values < 0 for g in grids]) if len(grids) >= 2 else None,
        scorer_value=scorer_value, per_sample=per_sample,
        config_digest=cfg.digest())
    (out_dir / "metrics.json").write_text(report.to_json())
    _write_run_record(args.out, "eval", argv, cfg, None, started, ["metrics.json"])
    summary = ", ".join(f"{k}={v:.4f}" for k, v in
                        [("iou_mean", iou_mean), ("acc", acc),
                         ("tmd", report.tmd), ("scorer", scorer_value)]
                        if v is not None)
    print(f"eval: {summary or 'no metrics requested'} -> {out_dir / 'metrics.json'}")
    return 0


def _cmd_inspect_checkpoint(args, argv) -> int:
    directory = Path(args.dir)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise RuntimeError(f"no checkpoint manifest at {directory}")
    manifest = json.loads(manifest_path.read_text())
    weights_path = directory / "weights.npz"
    total = 0
    if weights_path.exists():
        with np.load(weights_path) as archive:
            total = int(sum(archive[k].size for k in archive.files))
    print(f"kind: {manifest.get('kind')}")
    print(f"format_version: {manifest.get('format_version')}")
    print(f"seed: {manifest.get('seed')}  epoch: {manifest.get('epoch')}")
    print(f"parameters: {total}")
    for key in ("config", "denoiser", "schedule"):
        if key in manifest:
            print(f"{key}: {json.dumps(manifest[key], sort_keys=True)}")
    if manifest.get("scale_factor") is not None:
        print(f"scale_factor: {manifest['scale_factor']}")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_config_flag(p):
    p.add_argument("--config", help="RunConfig TOML file")
    p.add_argument("--preset", choices=("desk", "paper"),
                   help="built-in defaults to start from (default: desk)")


def _add_sampler_flags(p):
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--eta", type=float, help="ddim stochasticity")
    p.add_argument("--guidance", type=float, help="guidance scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxdiff",
        description="Text-conditioned latent-diffusion shape pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")

    ds = sub.add_parser("dataset", help="dataset operations")
    ds_sub = ds.add_subparsers(dest="dataset_command", metavar="action")
    p = ds_sub.add_parser("build", help="generate the procedural dataset")
    _add_config_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of shapes")
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--categories", help="comma-separated category names")
    p.set_defaults(func=_cmd_dataset_build)

    p = sub.add_parser("voxelize", help="re-sample manifest shapes at a resolution")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("train-ae", help="train the patch VAE")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--width", type=int, help="encoder/decoder width")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_ae)

    p = sub.add_parser("calibrate-scale", help="set the latent scale factor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--max-shapes", type=int, default=256)
    p.set_defaults(func=_cmd_calibrate_scale)

    p = sub.add_parser("train-diffusion", help="train the latent denoiser")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--base-width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--plain-unet", action="store_true",
                   help="disable the inner full-resolution pathway")
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample shapes for a caption")
    _add_config_flag(p)
    _add_sampler_flags(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("complete", help="fill the unknown region of a shape")
    _add_config_flag(p)
    _add_sampler_flags(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--input", required=True, help=".vsdf file")
    mask_group = p.add_mutually_exclusive_group(required=True)
    mask_group.add_argument("--mask", help="mask file path")
    mask_group.add_argument("--mask-preset",
                            choices=("top-half", "bottom-half", "left-half"))
    p.add_argument("--caption", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_complete)

    p = sub.add_parser("manipulate", help="re-noise a shape toward a caption")
    _add_config_flag(p)
    _add_sampler_flags(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--input", required=True, help=".vsdf file")
    p.add_argument("--caption", required=True)
    p.add_argument("--t-mid", type=int, default=700,
                   help="re-noising depth in schedule units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_manipulate)

    p = sub.add_parser("export-mesh", help="marching-cubes a .vsdf to .obj")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help=".obj file path")
    p.add_argument("--iso", type=float, default=0.0)
    p.set_defaults(func=_cmd_export_mesh)

    p = sub.add_parser("eval", help="score generated shapes")
    _add_config_flag(p)
    p.add_argument("--shapes", required=True, help="directory of .vsdf files")
    p.add_argument("--intended", help="category the shapes should be")
    p.add_argument("--classifier", help="classifier checkpoint directory")
    p.add_argument("--manifest", help="dataset manifest to train a classifier on")
    p.add_argument("--reference", help="directory of reference .vsdf files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=_cmd_inspect_checkpoint)

    return parser


def cli(argv=None) -> int:
    """Entry point; returns the process exit code instead of raising."""
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return int(args.func(args, argv) or 0)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as err:  # runtime failure -> exit 1 with message
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
