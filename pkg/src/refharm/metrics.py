"""Harmonization metrics: MSE, fMSE and PSNR on the 255 scale, foreground
diversity on the [0, 1] scale, and best-of-k candidate selection."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, UndefinedMetricError

PEAK = 255.0
PSNR_CAP = 100.0
# Below this MSE the ratio 255^2/mse would exceed 1e10, i.e. 100 dB.
_MSE_FLOOR = PEAK ** 2 * 1e-10


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _fg_weights(mask, shape):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != tuple(shape[:2]):
        raise ContractViolation(f"mask shape {mask.shape} does not match image {shape}")
    return mask


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((PEAK * a - PEAK * b) ** 2))


def fmse(a, b, mask) -> float:
    """Squared 255-scale error summed over the foreground, divided by |M|*C."""
    a, b = _pair(a, b)
    m = _fg_weights(mask, a.shape)
    area = m.sum()
    if area <= 0:
        raise UndefinedMetricError("fMSE is undefined for an empty mask")
    channels = a.shape[2] if a.ndim == 3 else 1
    diff = (PEAK * a - PEAK * b) ** 2
    if a.ndim == 3:
        diff = diff.sum(axis=2)
    return float((diff * m).sum() / (area * channels))


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def psnr_from_mse(value: float) -> float:
    if value < _MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(PEAK ** 2 / value)


def foreground_rms(a, b, mask) -> float:
    """Root-mean-square difference over foreground pixels, on the [0, 1] scale."""
    a, b = _pair(a, b)
    m = _fg_weights(mask, a.shape)
    area = m.sum()
    if area <= 0:
        raise UndefinedMetricError("foreground RMS is undefined for an empty mask")
    channels = a.shape[2] if a.ndim == 3 else 1
    diff = (a - b) ** 2
    if a.ndim == 3:
        diff = diff.sum(axis=2)
    return float(math.sqrt((diff * m).sum() / (area * channels)))


def pairwise_diversity(maps, mask) -> float:
    """Mean foreground RMS distance over all unordered pairs of maps.

    Stands in for the average pairwise LPIPS of the ablation protocol.
    """
    maps = list(maps)
    if len(maps) < 2:
        raise ContractViolation("pairwise diversity needs at least two maps")
    dists = [foreground_rms(a, b, mask) for a, b in itertools.combinations(maps, 2)]
    return float(np.mean(dists))


def pred_k_select(candidates, ground_truth, mask, k=None):
    """Index and fMSE of the candidate closest to the ground truth.

    Only the first ``k`` candidates are considered (all when ``k`` is None).
    Ties go to the lowest index.
    """
    candidates = list(candidates)
    if k is None:
        k = len(candidates)
    if not 1 <= k <= len(candidates):
        raise ContractViolation(f"k={k} with {len(candidates)} candidates")
    scores = [fmse(c, ground_truth, mask) for c in candidates[:k]]
    best = int(np.argmin(scores))  # argmin returns the first minimum
    return best, scores[best]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, prediction, ground_truth, mask, chosen_index=0, **extra):
        row = {
            "mse": mse(prediction, ground_truth),
            "fmse": fmse(prediction, ground_truth, mask),
            "psnr": psnr(prediction, ground_truth),
            "chosen_k_index": int(chosen_index),
        }
        row.update(extra)
        self.rows.append(row)
        return row

    @property
    def aggregates(self) -> dict:
        if not self.rows:
            return {}
        keys = [k for k, v in self.rows[0].items()
                if isinstance(v, (int, float)) and k != "chosen_k_index"]
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def to_dict(self) -> dict:
        return {"meta": self.meta, "aggregates": self.aggregates, "rows": self.rows}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def save_csv(self, path) -> None:
        from .dataio import write_csv

        write_csv(path, self.rows)

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        data = json.loads(Path(path).read_text())
        report = cls(rows=data["rows"], meta=data.get("meta", {}))
        stored = data.get("aggregates", {})
        for key, value in report.aggregates.items():
            if key in stored and not math.isclose(stored[key], value, rel_tol=1e-9, abs_tol=1e-12):
                raise ContractViolation(f"aggregate {key} does not match its rows")
        return report
