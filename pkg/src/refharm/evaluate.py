"""Evaluation protocols: single-result scoring and best-of-k ("pred-k")."""
from __future__ import annotations

import torch

from . import reflectance as rg
from .batch import SceneBatch, to_hwc
from .errors import ConfigurationError
from .harmonizer import harmonize
from .metrics import EvalReport, pairwise_diversity, pred_k_select
from .train import _derive_seed, guidance


def image_generator(seed, index) -> torch.Generator:
    return torch.Generator().manual_seed(_derive_seed(seed, 4, index))


@torch.no_grad()
def candidates_for(harmonizer, item: SceneBatch, mode, k=1, reflectance_model=None, generator=None,
                   source="posterior"):
    """Harmonized candidates (and the reflectances used) for one scene."""
    if mode != "pred":
        guide = guidance(mode, item)
        return [harmonize(harmonizer, item.composite, item.mask, guide)], [guide]
    if reflectance_model is None:
        raise ConfigurationError("pred mode needs a trained reflectance model")
    maps = rg.sample_diverse(reflectance_model, item.composite, item.mask, k, generator, source)
    stacked = torch.cat(maps) * item.mask
    n = stacked.shape[0]
    outs = harmonize(harmonizer, item.composite.expand(n, -1, -1, -1), item.mask.expand(n, -1, -1, -1),
                     stacked)
    return list(outs.split(1)), maps


@torch.no_grad()
def evaluate(harmonizer, data: SceneBatch, mode, protocol="single", k=1, reflectance_model=None,
             seed=0, source="posterior", prefixes=()) -> EvalReport:
    """Score a harmonizer over a dataset.

    ``protocol="single"`` scores one result per image (for ``pred`` the first
    sampled reflectance). ``protocol="pred-k"`` samples ``k`` reflectances per
    image and keeps the candidate with the lowest fMSE. ``prefixes`` adds
    best-of-j fMSE columns for each j, taken from the same candidate stream.
    """
    if protocol not in ("single", "pred-k"):
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    n_cand = 1 if protocol == "single" else k
    harmonizer.eval()
    if reflectance_model is not None:
        reflectance_model.eval()
    report = EvalReport(meta={"mode": mode, "protocol": protocol, "k": n_cand, "seed": seed,
                              "source": source})
    for i in range(len(data)):
        item = data.index(slice(i, i + 1))
        outs, maps = candidates_for(harmonizer, item, mode, n_cand, reflectance_model,
                                    image_generator(seed, i), source)
        gt = to_hwc(item.ground_truth)
        mask = item.mask[0, 0].double().numpy()
        cands = [to_hwc(o) for o in outs]
        idx, _ = pred_k_select(cands, gt, mask)
        extra = {"index": i}
        for j in prefixes:
            extra[f"fmse_best_of_{j}"] = pred_k_select(cands, gt, mask, j)[1]
        if len(cands) > 1:
            extra["harm_diversity"] = pairwise_diversity(cands, mask)
            extra["refl_diversity"] = pairwise_diversity([to_hwc(m) for m in maps], mask)
        report.add(cands[idx], gt, mask, idx, **extra)
    return report

