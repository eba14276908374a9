"""End-to-end directional study for one seed.

Builds train/test sets on disk, trains the reflectance generator and the
base / gt / fg harmonizers, then scores them on a held-out set. The
predicted-reflectance protocol feeds generator samples to the gt-trained
harmonizer, i.e. the guided network is trained with ground-truth
reflectance and given predicted reflectance at test time.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .evaluate import evaluate
from .retinex import build_dataset
from .train import (TrainConfig, checkpoint_load, epoch_means, load_dataset, read_checkpoint_header,
                    read_history,
                    train_harmonizer, train_reflectance)

log = logging.getLogger(__name__)


@dataclass
class StudyConfig:
    n_train: int = 2000
    n_test: int = 200
    image_size: int = 32
    epochs: int = 30
    k: int = 10
    prefixes: tuple = (1, 3, 10)


def _cached_or_train(path: Path, config: TrainConfig, train):
    if path.is_file():
        header = read_checkpoint_header(path)
        if header["config_hash"] == config.digest():
            bundle = checkpoint_load(path)
            hist = path.with_name(path.stem + "_history.csv")
            if hist.is_file():
                bundle.history = read_history(hist)
            return bundle
    return train()


def run_seed(seed: int, workdir, study: StudyConfig = StudyConfig(), reuse=False) -> dict:
    """Run the study for one seed and return (and save) its summary.

    With ``reuse`` an existing checkpoint whose config hash matches is loaded
    instead of retrained.
    """
    root = Path(workdir) / f"seed{seed}"
    ckpt_dir = root / "checkpoints"
    size = study.image_size
    t0 = time.time()
    train_manifest = root / "train" / "manifest.jsonl"
    test_manifest = root / "test" / "manifest.jsonl"
    if not (reuse and train_manifest.is_file()):
        build_dataset(study.n_train, size, size, seed=10_000 + seed, out_dir=root / "train")
    if not (reuse and test_manifest.is_file()):
        build_dataset(study.n_test, size, size, seed=20_000 + seed, out_dir=root / "test")
    train_data = load_dataset(train_manifest)
    test_data = load_dataset(test_manifest)
    ambiguous = test_data.ambiguous()

    config = TrainConfig(epochs=study.epochs, seed=seed, image_size=size,
                         manifest=str(train_manifest), checkpoint_dir=str(ckpt_dir))
    refl = _cached_or_train(ckpt_dir / "reflectance.ckpt", config,
                            lambda: train_reflectance(config, train_data))
    log.info("seed %d: reflectance model ready (%.0fs)", seed, time.time() - t0)
    harm = {}
    for mode in ("base", "gt", "fg"):
        harm[mode] = _cached_or_train(ckpt_dir / f"harmonizer_{mode}.ckpt", config,
                                      lambda: train_harmonizer(config, train_data, mode))
        log.info("seed %d: %s harmonizer ready (%.0fs)", seed, mode, time.time() - t0)

    summary = {"seed": seed, "n_test": len(test_data), "n_ambiguous": len(ambiguous)}
    for mode, bundle in harm.items():
        summary[f"{mode}_fmse"] = evaluate(bundle.model, test_data, mode).aggregates["fmse"]
        summary[f"{mode}_fmse_ambiguous"] = evaluate(bundle.model, ambiguous, mode).aggregates["fmse"]
        summary[f"{mode}_mse"] = evaluate(bundle.model, test_data, mode).aggregates["mse"]

    gt_h = harm["gt"].model
    for source in ("posterior", "prior"):
        report = evaluate(gt_h, test_data, "pred", "pred-k", study.k, refl.model, seed=seed,
                          source=source, prefixes=study.prefixes)
        agg = report.aggregates
        tag = "pred" if source == "posterior" else "prior"
        summary[f"{tag}_best_of_k_fmse"] = agg["fmse"]
        summary[f"{tag}_harm_diversity"] = agg["harm_diversity"]
        for j in study.prefixes:
            summary[f"{tag}_best_of_{j}_fmse"] = agg[f"fmse_best_of_{j}"]
        summary[f"{tag}_prefix_monotone"] = all(
            row[f"fmse_best_of_{a}"] >= row[f"fmse_best_of_{b}"]
            for row in report.rows for a, b in zip(study.prefixes, study.prefixes[1:]))
        amb = evaluate(gt_h, ambiguous, "pred", "pred-k", study.k, refl.model, seed=seed,
                       source=source).aggregates
        summary[f"{tag}_refl_diversity_ambiguous"] = amb["refl_diversity"]
        summary[f"{tag}_best_of_k_fmse_ambiguous"] = amb["fmse"]
        report.save_json(root / f"eval_{tag}_k{study.k}.json")

    if refl.history:
        rec = epoch_means(refl.history, "rec")
        summary["rec_first_epoch"], summary["rec_last_epoch"] = rec[0], rec[-1]
    summary["seconds"] = time.time() - t0
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
