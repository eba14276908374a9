"""Command line entry point.

    refharm gen-data --n 2000 --seed 0
    refharm train-gen --epochs 30
    refharm train-harm --mode gt
    refharm eval --protocol pred-k --k 10 --harmonizer runs/checkpoints/harmonizer_gt.ckpt \\
        --reflectance runs/checkpoints/reflectance.ckpt --mode pred
    refharm sample --k 10 --index 0 ...
    refharm grid --samples runs/samples

Outputs go under ``--root`` (default ``$REFHARM_OUT`` or ``./refharm-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .batch import to_hwc
from .dataio import MANIFEST_NAME, manifest_rows, read_image, write_image
from .errors import (ConfigurationError, ContractViolation, FormatError, ManifestError,
                     TrainingDiverged)
from .evaluate import candidates_for, evaluate, image_generator
from .retinex import build_dataset
from .train import (GUIDANCE_MODES, TrainConfig, checkpoint_load, epoch_means, load_dataset,
                    train_harmonizer, train_reflectance)

ROOT_ENV = "REFHARM_OUT"
log = logging.getLogger("refharm")


class CliError(Exception):
    pass


def _root(args) -> Path:
    return Path(args.root or os.environ.get(ROOT_ENV) or "refharm-out")


def _manifest(args, default_sub="data") -> Path:
    path = Path(args.data) if args.data else _root(args) / default_sub
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise CliError(f"no manifest at {path}; run `refharm gen-data` first or pass --data")
    return path


def _checkpoint(path, what):
    if path is None:
        raise CliError(f"--{what} is required")
    if not Path(path).is_file():
        raise CliError(f"{what} checkpoint not found: {path}")
    return checkpoint_load(path)


def _config(args, manifest: Path, ckpt_dir: Path) -> TrainConfig:
    data = TrainConfig.from_file(args.config).to_dict() if args.config else {}
    rows = manifest_rows(manifest)
    if rows:
        data["image_size"] = rows[0]["height"]
    for key in ("epochs", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    data.update(manifest=str(manifest), checkpoint_dir=str(ckpt_dir))
    return TrainConfig.from_dict(data)


def _progress(bundle, epoch):
    keys = [k for k in bundle.history[-1] if k not in ("step", "epoch")]
    means = {k: round(epoch_means(bundle.history, k)[-1], 5) for k in keys}
    log.info("%s epoch %d: %s", bundle.kind, epoch, means)


# --- commands ------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out) if args.out else _root(args) / "data"
    if (out / MANIFEST_NAME).exists() and not args.force:
        raise CliError(f"{out / MANIFEST_NAME} exists; pass --force to overwrite")
    rows = build_dataset(args.n, args.size, args.size, args.seed, out, workers=args.workers)
    n_amb = sum(r["ambiguity_factor"] != 1.0 for r in rows)
    return {"manifest": str(out / MANIFEST_NAME), "n": len(rows), "ambiguous": n_amb}


def cmd_train_gen(args):
    manifest = _manifest(args)
    ckpt_dir = Path(args.out) if args.out else _root(args) / "checkpoints"
    config = _config(args, manifest, ckpt_dir)
    data = load_dataset(manifest)
    bundle = train_reflectance(config, data, progress=_progress)
    rec = epoch_means(bundle.history, "rec") if bundle.history else []
    return {"checkpoint": str(ckpt_dir / "reflectance.ckpt"), "steps": bundle.step,
            "rec_first_epoch": rec[0] if rec else None, "rec_last_epoch": rec[-1] if rec else None}


def cmd_train_harm(args):
    manifest = _manifest(args)
    ckpt_dir = Path(args.out) if args.out else _root(args) / "checkpoints"
    config = _config(args, manifest, ckpt_dir)
    refl = None
    if args.mode == "pred":
        refl = _checkpoint(args.reflectance, "reflectance").model
    data = load_dataset(manifest)
    bundle = train_harmonizer(config, data, args.mode, refl, progress=_progress)
    harm = epoch_means(bundle.history, "harm") if bundle.history else []
    return {"checkpoint": str(ckpt_dir / f"harmonizer_{args.mode}.ckpt"), "steps": bundle.step,
            "loss_last_epoch": harm[-1] if harm else None}


def _eval_inputs(args):
    harm = _checkpoint(args.harmonizer, "harmonizer")
    mode = args.mode or harm.mode
    refl = None
    if mode == "pred":
        refl = _checkpoint(args.reflectance, "reflectance").model
    return harm, mode, refl


def cmd_eval(args):
    harm, mode, refl = _eval_inputs(args)
    if args.protocol == "pred-k" and mode != "pred":
        raise CliError("the pred-k protocol needs --mode pred (and --reflectance)")
    data = load_dataset(_manifest(args, "test"))
    if args.ambiguous_only:
        data = data.ambiguous()
    report = evaluate(harm.model, data, mode, args.protocol, args.k, refl, seed=args.seed,
                      source=args.source)
    out = Path(args.out) if args.out else _root(args) / f"eval_{mode}_{args.protocol}_k{args.k}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save_json(out)
    if args.csv:
        report.save_csv(out.with_suffix(".csv"))
    return {"report": str(out), "n": len(report.rows), **report.meta, **report.aggregates}


def cmd_sample(args):
    harm, mode, refl = _eval_inputs(args)
    if mode != "pred":
        raise CliError("sampling needs a reflectance model: use --mode pred with --reflectance")
    data = load_dataset(_manifest(args, "test"))
    rows = manifest_rows(_manifest(args, "test"))
    indices = args.index or list(range(len(data)))
    out_root = Path(args.out) if args.out else _root(args) / "samples"
    written = []
    for i in indices:
        if not 0 <= i < len(data):
            raise CliError(f"--index {i} out of range (dataset has {len(data)} samples)")
        item = data.index(slice(i, i + 1))
        outs, maps = candidates_for(harm.model.eval(), item, "pred", args.k, refl.eval(),
                                    image_generator(args.seed, i), args.source)
        folder = out_root / rows[i]["id"]
        folder.mkdir(parents=True, exist_ok=True)
        for j, (o, m) in enumerate(zip(outs, maps)):
            write_image(folder / f"reflectance_{j}.png", np.clip(to_hwc(m * item.mask), 0, 1))
            write_image(folder / f"harmonized_{j}.png", np.clip(to_hwc(o), 0, 1))
        written.append(str(folder))
    return {"k": args.k, "folders": written}


def cmd_grid(args):
    src = Path(args.samples) if args.samples else _root(args) / "samples"
    folders = sorted(p for p in src.iterdir() if p.is_dir()) if src.is_dir() else []
    if not folders:
        raise CliError(f"no sample folders under {src}; run `refharm sample` first")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for folder in folders:
        k = len(list(folder.glob("reflectance_*.png")))
        if k == 0 or k != len(list(folder.glob("harmonized_*.png"))):
            raise CliError(f"{folder} does not hold matching reflectance/harmonized images")
        top = [read_image(folder / f"reflectance_{j}.png") for j in range(k)]
        bottom = [read_image(folder / f"harmonized_{j}.png") for j in range(k)]
        grid = np.concatenate([np.concatenate(top, axis=1), np.concatenate(bottom, axis=1)], axis=0)
        path = out / f"grid_{folder.name}.png"
        write_image(path, grid)
        written.append(str(path))
    return {"grids": written}


def cmd_study(args):
    from .study import StudyConfig, run_seed

    study = StudyConfig(n_train=args.n_train, n_test=args.n_test, epochs=args.epochs)
    summaries = [run_seed(s, _root(args) / "study", study, reuse=args.reuse) for s in args.seeds]
    return {"seeds": summaries}


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refharm", description="Reflectance-guided harmonization on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, seed_default=0):
        p.add_argument("--root", help=f"output root (default ${ROOT_ENV} or ./refharm-out)")
        p.add_argument("--seed", type=int, default=seed_default, help="governs all randomness")
        p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=32, help="image height and width")
    p.add_argument("--out", help="output directory (default ROOT/data)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train-gen", cmd_train_gen, "train the reflectance generator"),
                             ("train-harm", cmd_train_harm, "train a harmonizer")):
        p = sub.add_parser(name, help=text)
        common(p, seed_default=None)
        p.add_argument("--data", help="dataset directory or manifest (default ROOT/data)")
        p.add_argument("--config", help="JSON training config; flags override it")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--out", help="checkpoint directory (default ROOT/checkpoints)")
        if name == "train-harm":
            p.add_argument("--mode", choices=GUIDANCE_MODES, required=True)
            p.add_argument("--reflectance", help="reflectance checkpoint (pred mode)")
        p.set_defaults(func=func)

    for name, func, text in (("eval", cmd_eval, "score a harmonizer and write an EvalReport"),
                             ("sample", cmd_sample, "write k reflectance/harmonization samples")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--data", help="dataset directory or manifest (default ROOT/test)")
        p.add_argument("--harmonizer", required=True, help="harmonizer checkpoint")
        p.add_argument("--reflectance", help="reflectance checkpoint (pred mode)")
        p.add_argument("--mode", choices=GUIDANCE_MODES, help="guidance (default: the checkpoint's)")
        p.add_argument("--k", type=int, default=1 if name == "eval" else 10)
        p.add_argument("--source", choices=("posterior", "prior"), default="posterior",
                       help="sample codes from the encoder or the unit Gaussian")
        p.add_argument("--out", help="output path")
        if name == "eval":
            p.add_argument("--protocol", choices=("single", "pred-k"), default="single")
            p.add_argument("--csv", action="store_true", help="also write per-image rows as CSV")
            p.add_argument("--ambiguous-only", action="store_true",
                           help="score only samples whose reflectance was rescaled")
        else:
            p.add_argument("--index", type=int, nargs="*", help="sample indices (default all)")
        p.set_defaults(func=func)

    p = sub.add_parser("grid", help="tile sample folders into 2-row PNG grids")
    common(p)
    p.add_argument("--samples", help="folder written by `sample` (default ROOT/samples)")
    p.add_argument("--out", help="where to write grid PNGs (default: the samples folder)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("study", help="run the full directional study for several seeds")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--reuse", action="store_true", help="reuse matching checkpoints")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        summary = args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good state saved to {exc.checkpoint_path}", file=sys.stderr)
        return 3
    except (CliError, ConfigurationError, ContractViolation, FormatError, ManifestError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
