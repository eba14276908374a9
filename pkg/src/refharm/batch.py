"""Stacking scene samples into NCHW tensors for the networks."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch


def to_nchw(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) array -> (1, C, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)),
                           dtype=dtype).unsqueeze(0)


def to_hwc(tensor: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) float64 array."""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return tensor.detach().to(torch.float64).permute(1, 2, 0).cpu().numpy()


@dataclass
class SceneBatch:
    """All tensors are (B, C, H, W); ``mask`` has one channel.

    ``reflectance`` and ``fg_only_reflectance`` are zero outside the mask.
    """

    composite: torch.Tensor
    mask: torch.Tensor
    ground_truth: torch.Tensor
    original: torch.Tensor
    reflectance: torch.Tensor
    fg_only_reflectance: torch.Tensor
    ambiguity: torch.Tensor

    @classmethod
    def from_samples(cls, samples, dtype=torch.float32) -> "SceneBatch":
        def stack(get):
            return torch.as_tensor(np.stack([get(s).transpose(2, 0, 1) for s in samples]), dtype=dtype)

        return cls(
            composite=stack(lambda s: s.composite),
            mask=stack(lambda s: s.mask[..., None]),
            ground_truth=stack(lambda s: s.ground_truth),
            original=stack(lambda s: s.original_fg_image),
            reflectance=stack(lambda s: s.reflectance * s.mask[..., None]),
            fg_only_reflectance=stack(lambda s: s.foreground_only_reflectance * s.mask[..., None]),
            ambiguity=torch.as_tensor([s.ambiguity_factor for s in samples], dtype=torch.float64),
        )

    def __len__(self):
        return self.composite.shape[0]

    def index(self, idx) -> "SceneBatch":
        return SceneBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def to(self, dtype) -> "SceneBatch":
        return SceneBatch(**{f.name: getattr(self, f.name).to(dtype) for f in fields(self)})

    def ambiguous(self) -> "SceneBatch":
        """Rows whose foreground factorisation was rescaled (factor != 1)."""
        return self.index(torch.nonzero(self.ambiguity != 1.0).flatten())
