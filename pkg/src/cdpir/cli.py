"""Command-line interface for the full reconstruction pipeline.

Subcommands: phantom (build a dataset), simulate (sparse-view resampling),
train (velocity model), reconstruct (cdpir/asdpocs/ossart), eval (PSNR/SSIM
tables), sweep (parameter grids). Every command accepts a JSON config whose
keys mirror its flags; flags override file values, unknown keys are
rejected, and a resolved-config echo is written next to the outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .geometry import (
    GeometryKind,
    ImageGrid,
    Projector,
    default_geometry,
    subsample_views,
)
from .interpolant import InterpolantSchedule
from .metrics import evaluate
from .model import (
    CheckpointError,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    train,
)
from .reconstruct import CdpirConfig, cdpir_reconstruct, reconstruct_baselines
from .simulate import (
    DatasetConfig,
    DatasetManifest,
    Image,
    NoiseKind,
    NoiseModel,
    build_dataset,
    geometry_descriptor,
    geometry_from_descriptor,
    load_split,
    simulate_sinogram,
)
from .solver import AsdPocsConfig
from .tensorio import (
    TensorFormatError,
    export_preview,
    read_tensor,
    write_metrics_csv,
    write_tensor,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse variant that raises instead of exiting, so main() controls
    the exit code."""

    def error(self, message):
        raise UsageError(message)


def resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """Merge defaults <- config file <- non-None CLI overrides.

    Unknown keys in the file or overrides are rejected.
    """
    resolved = dict(defaults)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"config file is not valid JSON: {e}") from e
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise UsageError(f"unknown override keys: {sorted(unknown)}")
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def write_echo(out_dir: Path, name: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(resolved, indent=2, sort_keys=True))


def read_manifest(path) -> tuple[DatasetManifest, Path]:
    path = Path(path)
    try:
        manifest = DatasetManifest.from_json(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {path}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"bad manifest {path}: {e}") from e
    return manifest, path.parent


def manifest_grid(manifest: DatasetManifest) -> ImageGrid:
    g = manifest.grid
    return ImageGrid(g["nx"], g["ny"], g["pixel_size"])


def noise_from_dict(d: dict) -> NoiseModel:
    return NoiseModel(kind=NoiseKind(d["kind"]), i0=d["i0"],
                      sigma_e=d["sigma_e"], atten_scale=d["atten_scale"])


PHANTOM_DEFAULTS = {
    "nx": 64,
    "domains": [0, 1],
    "ood_domain": 2,
    "n_train": 100,
    "n_test": 10,
    "base_seed": 0,
    "n_views": 246,
    "n_det": None,
    "geometry_kind": "fan_flat",
    "noise_kind": "none",
    "noise_i0": 1e5,
    "noise_sigma_e": 0.0,
    "noise_atten_scale": 1.0,
}


def cmd_phantom(args) -> int:
    resolved = resolve_config(
        PHANTOM_DEFAULTS, args.config,
        {"nx": args.nx, "n_train": args.n_train, "n_test": args.n_test,
         "base_seed": args.seed, "n_views": args.views},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ImageGrid(resolved["nx"], resolved["nx"], 1.0)
    n_det = resolved["n_det"] or 2 * resolved["nx"]
    geometry = default_geometry(grid, GeometryKind(resolved["geometry_kind"]),
                                n_det=n_det, n_views=resolved["n_views"])
    noise = NoiseModel(kind=NoiseKind(resolved["noise_kind"]),
                       i0=resolved["noise_i0"],
                       sigma_e=resolved["noise_sigma_e"],
                       atten_scale=resolved["noise_atten_scale"])
    config = DatasetConfig(
        out_dir=str(out), nx=resolved["nx"],
        domains=tuple(resolved["domains"]),
        ood_domain=resolved["ood_domain"],
        n_train=resolved["n_train"], n_test=resolved["n_test"],
        base_seed=resolved["base_seed"], noise=noise, geometry=geometry,
    )
    manifest = build_dataset(config)
    write_echo(out, "phantom_config.json", resolved)
    print(f"wrote {len(manifest.entries)} cases to {out}")
    return EXIT_OK


SIMULATE_DEFAULTS = {
    "views": None,  # None keeps the manifest's full view count
    "noise_kind": None,  # None inherits the manifest's noise
    "noise_i0": None,
    "noise_sigma_e": None,
    "noise_atten_scale": None,
}


def cmd_simulate(args) -> int:
    resolved = resolve_config(SIMULATE_DEFAULTS, args.config,
                              {"views": args.views})
    manifest, root = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = manifest_grid(manifest)
    geometry = geometry_from_descriptor(manifest.geometry)
    n_keep = resolved["views"] or geometry.n_views
    sparse_geom = subsample_views(geometry, n_keep)
    projector = Projector(sparse_geom, grid)
    noise_dict = dict(manifest.noise)
    for key, field in [("noise_kind", "kind"), ("noise_i0", "i0"),
                       ("noise_sigma_e", "sigma_e"),
                       ("noise_atten_scale", "atten_scale")]:
        if resolved[key] is not None:
            noise_dict[field] = resolved[key]
    noise = noise_from_dict(noise_dict)

    new_manifest = DatasetManifest(
        grid=dict(manifest.grid),
        geometry=geometry_descriptor(sparse_geom),
        noise=noise_dict,
    )
    for e in manifest.entries:
        phantom = read_tensor(root / e.phantom_file).astype(np.float64)
        sino = simulate_sinogram(Image(grid, phantom), projector, noise,
                                 seed=e.seed + 10_000_019)
        write_tensor(out / e.phantom_file, phantom.astype(np.float32))
        write_tensor(out / e.sinogram_file, sino.astype(np.float32))
        new_manifest.entries.append(e)
    (out / "manifest.json").write_text(new_manifest.to_json())
    write_echo(out, "simulate_config.json", resolved)
    print(f"wrote {len(new_manifest.entries)} sparse-view cases ({n_keep} views) to {out}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "model": "tiny",
    "patch_size": 2,
    "schedule": "gvp",
    "iters": 2000,
    "batch_size": 16,
    "learning_rate": 1e-4,
    "label_dropout_prob": 0.1,
    "seed": 0,
    "checkpoint_every": 0,
    "single_domain": None,
}


def cmd_train(args) -> int:
    resolved = resolve_config(
        TRAIN_DEFAULTS, args.config,
        {"model": args.model, "iters": args.iters, "seed": args.seed,
         "batch_size": args.batch_size, "single_domain": args.single_domain,
         "learning_rate": args.learning_rate},
    )
    manifest, root = read_manifest(args.data)
    train_ids = [e.domain_id for e in manifest.entries if e.split == "train"]
    if not train_ids:
        raise DataError("manifest has no training entries")
    n_labels = max(train_ids) + 1
    single = resolved["single_domain"]
    if single is not None and single not in set(train_ids):
        raise DataError(f"no training phantoms for domain {single}")
    domains = None if single is None else [single]
    x0, labels, _ = load_split(manifest, root, "train", domains=domains)

    model_config = ModelConfig.from_variant(
        resolved["model"], image_size=x0.shape[-1], n_labels=n_labels,
        patch_size=resolved["patch_size"],
    )
    train_config = TrainConfig(
        n_iters=resolved["iters"], batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        label_dropout_prob=resolved["label_dropout_prob"],
        seed=resolved["seed"], checkpoint_every=resolved["checkpoint_every"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, history = train(x0, labels, model_config, train_config,
                       InterpolantSchedule(resolved["schedule"]),
                       out_dir=out, log_path=out / "loss.csv")
    write_echo(out, "train_config.json", resolved)
    final = history[-1][1] if history else float("nan")
    print(f"trained {resolved['iters']} iters; final loss {final:.6f}; "
          f"checkpoint at {out / 'ckpt_final.bin'}")
    return EXIT_OK


RECONSTRUCT_DEFAULTS = {
    "method": "cdpir",
    "steps": 1000,
    "mu": 1.0,
    "label": None,
    "dc_cadence": 1,
    "dc_p_outer": 10,
    "dc_q_tv": 1,
    "dc_k_subsets": 5,
    "init_iters": 30,
    "p_outer": 30,  # classical-baseline budget
    "q_tv": 1,
    "k_subsets": 5,
    "renoise": True,
    "schedule": "gvp",
    "seed": 0,
}


def parse_label(value):
    if value is None or value == "null":
        return None
    return int(value)


def cmd_reconstruct(args) -> int:
    resolved = resolve_config(
        RECONSTRUCT_DEFAULTS, args.config,
        {"method": args.method, "steps": args.steps, "mu": args.mu,
         "label": parse_label(args.label), "seed": args.seed,
         "p_outer": args.p_outer},
    )
    manifest, _ = read_manifest(args.manifest)
    grid = manifest_grid(manifest)
    geometry = geometry_from_descriptor(manifest.geometry)
    projector = Projector(geometry, grid)
    try:
        y = read_tensor(args.sino).astype(np.float64)
    except FileNotFoundError as e:
        raise DataError(f"sinogram not found: {args.sino}") from e
    if y.shape != (geometry.n_views, geometry.n_det):
        raise DataError(
            f"sinogram shape {y.shape} does not match manifest geometry "
            f"({geometry.n_views}, {geometry.n_det})"
        )
    truth = None
    if args.phantom is not None:
        truth = read_tensor(args.phantom).astype(np.float64)

    method = resolved["method"]
    if method == "cdpir":
        if args.ckpt is None:
            raise UsageError("method cdpir requires --ckpt")
        try:
            model, _ = load_checkpoint(args.ckpt)
        except FileNotFoundError as e:
            raise DataError(f"checkpoint not found: {args.ckpt}") from e
        config = CdpirConfig(
            n_steps=resolved["steps"], mu=resolved["mu"],
            label=resolved["label"], dc_cadence=resolved["dc_cadence"],
            dc_config=AsdPocsConfig(p_outer=resolved["dc_p_outer"],
                                    q_tv=resolved["dc_q_tv"],
                                    k_subsets=resolved["dc_k_subsets"]),
            init_config=AsdPocsConfig(init_iters=resolved["init_iters"],
                                      k_subsets=resolved["dc_k_subsets"]),
            renoise=resolved["renoise"],
            schedule=InterpolantSchedule(resolved["schedule"]),
            seed=resolved["seed"],
        )
        report = cdpir_reconstruct(y, projector, model, config,
                                   ground_truth=truth)
    elif method in ("asdpocs", "ossart"):
        config = AsdPocsConfig(p_outer=resolved["p_outer"],
                               q_tv=resolved["q_tv"],
                               k_subsets=resolved["k_subsets"])
        report = reconstruct_baselines(y, projector, method, config,
                                       ground_truth=truth)
    else:
        raise UsageError(f"unknown method {method!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "image.ten")
    lo, hi = float(report.image.min()), float(report.image.max())
    export_preview(report.image, out / "preview.pgm",
                   (lo, hi if hi > lo else lo + 1.0))
    write_echo(out, "reconstruct_config.json", resolved)
    print(f"reconstructed with {method}; residual "
          f"{report.diagnostics[-1]['residual']:.6g}; outputs in {out}")
    return EXIT_OK


EVAL_DEFAULTS = {"split": "test", "method_name": "recon"}


def cmd_eval(args) -> int:
    resolved = resolve_config(EVAL_DEFAULTS, args.config,
                              {"split": args.split,
                               "method_name": args.method_name})
    manifest, root = read_manifest(args.manifest)
    recon_dir = Path(args.recon)
    rows = []
    for e in manifest.entries:
        if e.split != resolved["split"]:
            continue
        stem = e.phantom_file.replace("_phantom.ten", "")
        recon_path = recon_dir / f"{stem}_recon.ten"
        if not recon_path.exists():
            raise DataError(f"missing reconstruction {recon_path}")
        truth = read_tensor(root / e.phantom_file).astype(np.float64)
        recon = read_tensor(recon_path).astype(np.float64)
        result = evaluate(recon, truth)
        rows.append({"case": stem, "method": resolved["method_name"],
                     "psnr": result.psnr_db, "ssim": result.ssim})
    if not rows:
        raise DataError(f"no entries in split {resolved['split']!r}")
    write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


SWEEP_DEFAULTS = {
    "checkpoints": None,  # list of checkpoint paths (required)
    "steps": [200, 1000],
    "mu": [1.0],
    "label": None,
    "n_cases": 2,
    "split": "test",
    "domain": None,
    "dc_cadence": 1,
    "dc_p_outer": 10,
    "dc_q_tv": 1,
    "dc_k_subsets": 5,
    "init_iters": 30,
    "renoise": True,
    "schedule": "gvp",
    "seed": 0,
}


def cmd_sweep(args) -> int:
    resolved = resolve_config(SWEEP_DEFAULTS, args.config, {})
    if not resolved["checkpoints"]:
        raise UsageError("sweep config must list at least one checkpoint")
    manifest, root = read_manifest(args.manifest)
    grid = manifest_grid(manifest)
    geometry = geometry_from_descriptor(manifest.geometry)
    projector = Projector(geometry, grid)
    entries = [e for e in manifest.entries
               if e.split == resolved["split"]
               and (resolved["domain"] is None or e.domain_id == resolved["domain"])]
    entries = entries[: resolved["n_cases"]]
    if not entries:
        raise DataError("no matching test cases for sweep")

    rows = []
    for ckpt in resolved["checkpoints"]:
        try:
            model, _ = load_checkpoint(ckpt)
        except FileNotFoundError as e:
            raise DataError(f"checkpoint not found: {ckpt}") from e
        for n_steps in resolved["steps"]:
            for mu in resolved["mu"]:
                psnrs, ssims = [], []
                for e in entries:
                    y = read_tensor(root / e.sinogram_file).astype(np.float64)
                    truth = read_tensor(root / e.phantom_file).astype(np.float64)
                    config = CdpirConfig(
                        n_steps=n_steps, mu=mu, label=resolved["label"],
                        dc_cadence=resolved["dc_cadence"],
                        dc_config=AsdPocsConfig(
                            p_outer=resolved["dc_p_outer"],
                            q_tv=resolved["dc_q_tv"],
                            k_subsets=resolved["dc_k_subsets"]),
                        init_config=AsdPocsConfig(
                            init_iters=resolved["init_iters"],
                            k_subsets=resolved["dc_k_subsets"]),
                        renoise=resolved["renoise"],
                        schedule=InterpolantSchedule(resolved["schedule"]),
                        seed=resolved["seed"],
                    )
                    report = cdpir_reconstruct(y, projector, model, config)
                    result = evaluate(report.image, truth)
                    psnrs.append(result.psnr_db)
                    ssims.append(result.ssim)
                rows.append({
                    "case": f"{Path(ckpt).stem}|steps={n_steps}|mu={mu}",
                    "method": "cdpir",
                    "psnr": float(np.mean(psnrs)),
                    "ssim": float(np.mean(ssims)),
                })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    write_echo(out.parent, "sweep_config.json", resolved)
    print(f"wrote {len(rows)} sweep rows to {out}")
    return EXIT_OK


def build_parser() -> Parser:
    parser = Parser(prog="cdpir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="build a phantom/sinogram dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--nx", type=int)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="sparse-view sinograms from phantoms")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--views", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the velocity model")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["tiny", "small", "big"])
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--single-domain", type=int, dest="single_domain")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one sinogram")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sino", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--phantom", help="ground truth for PSNR diagnostics")
    p.add_argument("--method", choices=["cdpir", "asdpocs", "ossart"])
    p.add_argument("--steps", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--label", help="integer label or 'null'")
    p.add_argument("--seed", type=int)
    p.add_argument("--p-outer", type=int, dest="p_outer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR/SSIM table over a split")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recon", required=True, help="directory of *_recon.ten files")
    p.add_argument("--split")
    p.add_argument("--method-name", dest="method_name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="parameter-grid reconstruction sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("CDPIR_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"cdpir: bad CDPIR_THREADS value {threads!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"cdpir: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"cdpir: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TensorFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"cdpir: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ZeroDivisionError) as e:
        print(f"cdpir: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
