"""Synthetic Retinex scenes with exactly known reflectance and illumination.

Every image here is an ``(H, W, C)`` float array in ``[0, 1]``; masks are
``(H, W)`` arrays of 0/1. A scene is built as ``image = reflectance * illumination``
so the decomposition of any generated image is known exactly.

The foreground of a composite can be factorised in more than one way: with
probability 0.5 the generator multiplies the foreground reflectance by an
ambiguity factor ``s`` and divides the foreground illumination by ``s``. The
composite foreground is unchanged, the harmonized ground truth is not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, GenerationError, IntegrityError

RHO_MIN = 0.05
L_MAX = 1.0
MAX_ILLUM_STEP = 0.05
MIN_MASK_PIXELS = 16
MAX_MASK_FRACTION = 0.5

# Scene-level draw ranges. The foreground illumination is drawn at half
# intensity and the scene reflectance at most 0.5 so that both factorisations
# (A*s, L/s) with s in [0.5, 2] stay inside [RHO_MIN, 1] and (0, L_MAX].
SCENE_REFLECTANCE_RANGE = (0.1, 0.5)
FG_ILLUM_INTENSITY = 0.5
AMBIGUITY_RANGE = (0.5, 2.0)
AMBIGUITY_PROB = 0.5
CAST_RANGE = (0.3, 1.0)
MIN_CAST_DISTANCE = 0.15
INVARIANT_TOL = 1e-6


def check_image(x, name="image", channels=(1, 3)) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] not in channels:
        raise ContractViolation(f"{name}: expected HxWxC with C in {channels}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name}: non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ContractViolation(f"{name}: values outside [0, 1] ({x.min():.4g}, {x.max():.4g})")
    return x


def check_mask(mask, shape=None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractViolation(f"mask: expected HxW, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ContractViolation(f"mask shape {mask.shape} does not match image {tuple(shape)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractViolation("mask: values must be 0 or 1")
    return mask


def max_step(field_: np.ndarray) -> float:
    """Largest absolute difference between neighbouring pixels of a field."""
    dy = np.abs(np.diff(field_, axis=0)).max(initial=0.0)
    dx = np.abs(np.diff(field_, axis=1)).max(initial=0.0)
    return float(max(dx, dy))


def compose(reflectance, illumination) -> np.ndarray:
    """Elementwise ``reflectance * illumination`` clipped to ``[0, 1]``."""
    a = np.asarray(reflectance, dtype=np.float64)
    l = np.asarray(illumination, dtype=np.float64)
    if a.shape != l.shape:
        raise ContractViolation(f"compose: shape mismatch {a.shape} vs {l.shape}")
    if a.ndim != 3:
        raise ContractViolation(f"compose: expected HxWxC arrays, got shape {a.shape}")
    return np.clip(a * l, 0.0, 1.0)


def make_illumination_field(h, w, color_cast, rng, *, n_gradients=None, blob=True,
                            intensity=1.0) -> np.ndarray:
    """Smooth, strictly positive illumination field of shape ``(h, w, 3)``.

    The spatial pattern is ``1 + sum of planar gradients + one gaussian blob``,
    normalised so its maximum is 1, then scaled by ``intensity * color_cast``.
    ``n_gradients=None`` draws 0..3 gradients; pass 0 and ``blob=False`` for a
    constant field.
    """
    cast = np.asarray(color_cast, dtype=np.float64)
    if cast.shape != (3,):
        raise ContractViolation(f"color_cast must be a 3-vector, got shape {cast.shape}")
    if np.any(cast < CAST_RANGE[0]) or np.any(cast > CAST_RANGE[1]):
        raise ContractViolation(f"color_cast components must lie in {CAST_RANGE}, got {cast}")
    if not 0.0 < intensity <= L_MAX:
        raise ContractViolation(f"intensity must lie in (0, {L_MAX}], got {intensity}")
    if n_gradients is None:
        n_gradients = int(rng.integers(0, 4))
    if not 0 <= n_gradients <= 3:
        raise ContractViolation("at most 3 planar gradients")

    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    pattern = np.ones((h, w))
    for _ in range(n_gradients):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.0, 0.15)
        pattern += amp * (math.cos(theta) * xx + math.sin(theta) * yy)
    if blob:
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        sigma = rng.uniform(0.25, 0.5)
        amp = rng.uniform(-0.2, 0.2)
        pattern += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    pattern /= pattern.max()
    return intensity * pattern[..., None] * cast[None, None, :]


def _shape_mask(h, w, rng, scale=(0.15, 0.45)) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = rng.uniform(*scale) * h
    rx = rng.uniform(*scale) * w
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def make_reflectance(h, w, n_shapes, rng, value_range=(RHO_MIN, 1.0)) -> np.ndarray:
    """Piecewise-constant reflectance: random base colour with ``n_shapes``
    coloured rectangles/ellipses painted over it, floored at ``RHO_MIN``."""
    if n_shapes < 1:
        raise ContractViolation("n_shapes must be >= 1")
    lo, hi = value_range
    refl = np.empty((h, w, 3))
    refl[...] = rng.uniform(lo, hi, size=3)
    for _ in range(n_shapes):
        region = _shape_mask(h, w, rng, scale=(0.1, 0.4))
        refl[region] = rng.uniform(lo, hi, size=3)
    return np.clip(refl, RHO_MIN, 1.0)


def make_mask(h, w, rng, max_tries=10) -> np.ndarray:
    """Union of one or two ellipses/rectangles with a valid foreground area."""
    for _ in range(max_tries):
        region = _shape_mask(h, w, rng)
        if rng.random() < 0.5:
            region |= _shape_mask(h, w, rng)
        area = int(region.sum())
        if MIN_MASK_PIXELS <= area <= MAX_MASK_FRACTION * h * w:
            return region.astype(np.float64)
    raise GenerationError(f"no valid {h}x{w} mask after {max_tries} attempts")


def _draw_casts(rng):
    while True:
        bg = rng.uniform(*CAST_RANGE, size=3)
        fg = rng.uniform(*CAST_RANGE, size=3)
        if np.linalg.norm(bg - fg) >= MIN_CAST_DISTANCE:
            return bg, fg


@dataclass
class SceneSample:
    reflectance: np.ndarray
    bg_illum: np.ndarray
    fg_illum: np.ndarray
    mask: np.ndarray
    composite: np.ndarray
    ground_truth: np.ndarray
    original_fg_image: np.ndarray
    ambiguity_factor: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.reflectance.shape[:2]

    @property
    def foreground_only_reflectance(self) -> np.ndarray:
        """Reflectance a foreground-only reading would recover: the draw
        before the ambiguity rescale, i.e. ``A / s`` inside the mask."""
        m = self.mask[..., None]
        return self.reflectance * (1.0 - m) + (self.reflectance / self.ambiguity_factor) * m

    def validate(self, tol=INVARIANT_TOL) -> "SceneSample":
        h, w = self.shape
        try:
            for name in ("reflectance", "bg_illum", "fg_illum", "composite",
                         "ground_truth", "original_fg_image"):
                arr = getattr(self, name)
                if arr.shape != (h, w, 3):
                    raise IntegrityError(f"{name}: shape {arr.shape}, expected {(h, w, 3)}")
                check_image(arr, name, channels=(3,))
            check_mask(self.mask, (h, w))
        except ContractViolation as exc:
            raise IntegrityError(str(exc)) from exc
        if self.reflectance.min() < RHO_MIN - tol:
            raise IntegrityError("reflectance below floor")
        if self.bg_illum.min() <= 0 or self.fg_illum.min() <= 0:
            raise IntegrityError("illumination must be strictly positive")
        area = self.mask.sum()
        if not MIN_MASK_PIXELS <= area <= MAX_MASK_FRACTION * h * w:
            raise IntegrityError(f"mask area {area} out of range")
        if not AMBIGUITY_RANGE[0] <= self.ambiguity_factor <= AMBIGUITY_RANGE[1]:
            raise IntegrityError(f"ambiguity factor {self.ambiguity_factor} out of range")
        m = self.mask[..., None]
        expected = {
            "composite": compose(self.reflectance, m * self.fg_illum + (1 - m) * self.bg_illum),
            "ground_truth": compose(self.reflectance, self.bg_illum),
            "original_fg_image": compose(self.reflectance, self.fg_illum),
        }
        for name, ref in expected.items():
            err = np.abs(getattr(self, name) - ref).max()
            if err > tol:
                raise IntegrityError(f"{name} deviates from its factors by {err:.3g}")
        return self


def assemble_sample(reflectance, bg_illum, fg_illum, mask, ambiguity_factor=1.0, seed=0,
                    meta=None) -> SceneSample:
    """Build a sample (composite, ground truth, original image) from its factors."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return SceneSample(
        reflectance=reflectance,
        bg_illum=bg_illum,
        fg_illum=fg_illum,
        mask=m[..., 0],
        composite=compose(reflectance, m * fg_illum + (1 - m) * bg_illum),
        ground_truth=compose(reflectance, bg_illum),
        original_fg_image=compose(reflectance, fg_illum),
        ambiguity_factor=float(ambiguity_factor),
        seed=int(seed),
        meta=dict(meta or {}),
    )


def decompose_oracle(sample: SceneSample, region="full"):
    """Exact (reflectance, illumination) of a sample restricted to a region.

    ``full`` returns the factors of the ground truth. ``fg`` and ``bg`` return
    the factors of the composite with everything outside the region zeroed.
    """
    sample.validate()
    m = sample.mask[..., None]
    if region == "full":
        return sample.reflectance.copy(), sample.bg_illum.copy()
    if region == "fg":
        return sample.reflectance * m, sample.fg_illum * m
    if region == "bg":
        return sample.reflectance * (1 - m), sample.bg_illum * (1 - m)
    raise ContractViolation(f"unknown region {region!r}; expected fg, bg or full")


def _draw_factors(h, w, rng):
    refl = make_reflectance(h, w, int(rng.integers(4, 10)), rng, SCENE_REFLECTANCE_RANGE)
    cast_bg, cast_fg = _draw_casts(rng)
    bg = make_illumination_field(h, w, cast_bg, rng)
    fg = make_illumination_field(h, w, cast_fg, rng, intensity=FG_ILLUM_INTENSITY)
    mask = make_mask(h, w, rng)
    return refl, bg, fg, mask


def _apply_ambiguity(refl, fg_illum, mask, s):
    # Reflectance is rescaled on the object only; the fg illumination belongs to
    # the whole original scene, so it is rescaled everywhere. The original image
    # therefore reveals s through its unmasked context.
    m = mask[..., None]
    return refl * (1 - m) + refl * s * m, fg_illum / s


def synth_sample(h, w, rng, *, ambiguity_factor=None) -> SceneSample:
    """Draw one scene. ``ambiguity_factor=None`` rescales with probability 0.5
    by a log-uniform factor in [0.5, 2]; pass a number to force it."""
    if h < 16 or w < 16:
        raise ContractViolation(f"synth_sample needs h, w >= 16, got {h}x{w}")
    refl, bg, fg, mask = _draw_factors(h, w, rng)
    rescale_draw = rng.random()
    log_s = rng.uniform(math.log(AMBIGUITY_RANGE[0]), math.log(AMBIGUITY_RANGE[1]))
    if ambiguity_factor is None:
        s = math.exp(log_s) if rescale_draw < AMBIGUITY_PROB else 1.0
    else:
        s = float(ambiguity_factor)
        if not AMBIGUITY_RANGE[0] <= s <= AMBIGUITY_RANGE[1]:
            raise ContractViolation(f"ambiguity factor must lie in {AMBIGUITY_RANGE}")
    refl, fg = _apply_ambiguity(refl, fg, mask, s)
    return assemble_sample(refl, bg, fg, mask, s)


def make_ambiguous_pair(h, w, rng, factors=(0.7, 1.4)):
    """Two samples sharing the same composite foreground, differing only in
    how that foreground splits into reflectance and illumination."""
    refl, bg, fg, mask = _draw_factors(h, w, rng)
    out = []
    for s in factors:
        a, l_fg = _apply_ambiguity(refl, fg, mask, s)
        out.append(assemble_sample(a, bg, l_fg, mask, s))
    return tuple(out)


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample seed derived from the dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_indexed(h, w, seed, index) -> SceneSample:
    s = sample_seed(seed, index)
    sample = synth_sample(h, w, np.random.default_rng(s))
    sample.seed = s
    return sample


def generate_samples(n, h, w, seed) -> list[SceneSample]:
    return [generate_indexed(h, w, seed, i) for i in range(n)]


def build_dataset(n, h, w, seed, out_dir, workers=1) -> list[dict]:
    """Generate ``n`` samples into ``out_dir`` and return the manifest rows.

    Each sample derives from its own seed, so samples can be produced in
    parallel; the manifest is written by this process alone, in index order.
    """
    from . import dataio

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / dataio.MANIFEST_NAME
    manifest.write_text("")
    args = [(h, w, seed, i) for i in range(n)]
    if workers > 1 and n > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(generate_indexed, *zip(*args)))
    else:
        samples = [generate_indexed(*a) for a in args]
    rows = []
    for i, sample in enumerate(samples):
        row = dataio.save_sample(sample, out_dir, f"{i:05d}")
        row.update(index=i, dataset_seed=int(seed))
        rows.append(row)
    dataio.manifest_write(manifest, rows)
    return rows
