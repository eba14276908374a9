"""Training loops, configuration and checkpoints.

Training is a pure function of (config, data): parameter init, batch order
and reparameterization noise are all derived from ``config.seed``, and the
noise generator is re-seeded from (seed, step) so a resumed run replays the
uninterrupted one exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import reflectance as rg
from .batch import SceneBatch
from .dataio import manifest_scan, write_csv
from .errors import (ConfigurationError, ContractViolation, FormatError,
                     IncompatibleVersionError, TrainingDiverged)
from .harmonizer import Harmonizer, harmonization_loss, harmonize

log = logging.getLogger(__name__)

GUIDANCE_MODES = ("base", "gt", "fg", "pred")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr_generator: float = 2e-4
    lr_discriminator: float = 1e-4
    lr_harmonizer: float = 2e-4
    betas: tuple = (0.5, 0.999)
    adv_weight: float = rg.ADV_WEIGHT
    rec_reduction: str = "sum"
    grad_clip: float = 500.0
    seed: int = 0
    image_size: int = 32
    latent_dim: int = 16
    base_width: int = 32
    depth: int = 4
    demodulate: bool = True
    manifest: str | None = None
    checkpoint_dir: str | None = None
    eval_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lr_generator", "lr_discriminator", "lr_harmonizer"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.rec_reduction not in ("sum", "mean"):
            raise ConfigurationError("rec_reduction must be 'sum' or 'mean'")
        if not self.grad_clip >= 0:
            raise ConfigurationError("grad_clip must be >= 0 (0 disables clipping)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class NetworkBundle:
    kind: str
    model: torch.nn.Module
    optimizers: dict
    config: TrainConfig
    step: int = 0
    mode: str | None = None
    history: list = field(default_factory=list)


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _build_model(kind, config: TrainConfig):
    with torch.random.fork_rng():
        torch.manual_seed(_derive_seed(config.seed, 0 if kind == "reflectance" else 1))
        if kind == "reflectance":
            return rg.ReflectanceModel(config.latent_dim, config.base_width, config.depth,
                                       config.demodulate)
        if kind == "harmonizer":
            return Harmonizer(config.base_width, config.depth)
    raise ConfigurationError(f"unknown bundle kind {kind!r}")


def _build_optimizers(kind, model, config: TrainConfig) -> dict:
    adam = torch.optim.Adam
    if kind == "reflectance":
        return {
            "EG": adam(model.generator_parameters(), lr=config.lr_generator, betas=config.betas),
            "D": adam(model.D.parameters(), lr=config.lr_discriminator, betas=config.betas),
        }
    return {"H": adam(model.parameters(), lr=config.lr_harmonizer, betas=config.betas)}


def new_bundle(kind, config: TrainConfig, mode=None) -> NetworkBundle:
    model = _build_model(kind, config)
    return NetworkBundle(kind, model, _build_optimizers(kind, model, config), config, 0, mode)


# --- checkpoint container -------------------------------------------------
#
# b"RHCK" | version u16 | header length u32 | header JSON | tensor bytes | sha256
# The digest covers everything before it, so truncation or corruption is
# detected before any tensor is materialised.

CKPT_MAGIC = b"RHCK"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sHI")


def _flatten_state(bundle: NetworkBundle):
    tensors, extra = {}, {}
    for name, value in bundle.model.state_dict().items():
        tensors[f"model/{name}"] = value
    for opt_name, opt in bundle.optimizers.items():
        state = opt.state_dict()
        extra[opt_name] = state["param_groups"]
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                if not torch.is_tensor(value):
                    value = torch.tensor(value)
                tensors[f"opt/{opt_name}/{idx}/{key}"] = value
    return tensors, extra


def checkpoint_save(bundle: NetworkBundle, path) -> None:
    tensors, groups = _flatten_state(bundle)
    entries, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "schema_version": CKPT_VERSION,
        "kind": bundle.kind,
        "mode": bundle.mode,
        "step": bundle.step,
        "config": bundle.config.to_dict(),
        "config_hash": bundle.config.digest(),
        "param_groups": groups,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_checkpoint(raw, path)[0]


def _parse_checkpoint(raw: bytes, path):
    if len(raw) < _CKPT_PREFIX.size + 32:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, head_len = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise IncompatibleVersionError(
            f"{path}: checkpoint schema {version}, this build reads schema {CKPT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted checkpoint)")
    start = _CKPT_PREFIX.size
    header = json.loads(body[start:start + head_len])
    return header, memoryview(body)[start + head_len:]


def checkpoint_load(path) -> NetworkBundle:
    header, payload = _parse_checkpoint(Path(path).read_bytes(), path)
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    config = TrainConfig.from_dict(header["config"])
    bundle = new_bundle(header["kind"], config, header["mode"])
    bundle.step = header["step"]
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    bundle.model.load_state_dict(model_state)
    for opt_name, opt in bundle.optimizers.items():
        state = {}
        prefix = f"opt/{opt_name}/"
        for key, value in tensors.items():
            if key.startswith(prefix):
                idx, name = key[len(prefix):].split("/", 1)
                state.setdefault(int(idx), {})[name] = value
        opt.load_state_dict({"state": state, "param_groups": header["param_groups"][opt_name]})
    return bundle


# --- data ordering --------------------------------------------------------

def batch_indices(n, batch_size, seed, epoch) -> list[np.ndarray]:
    order = np.random.default_rng(_derive_seed(seed, 2, epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _schedule(n, config: TrainConfig):
    per_epoch = math.ceil(n / config.batch_size)
    return per_epoch, per_epoch * config.epochs


def _step_generator(config, step) -> torch.Generator:
    return torch.Generator().manual_seed(_derive_seed(config.seed, 3, step))


def _batch_for_step(data: SceneBatch, config: TrainConfig, step, per_epoch) -> SceneBatch:
    epoch, pos = divmod(step, per_epoch)
    return data.index(torch.as_tensor(batch_indices(len(data), config.batch_size, config.seed, epoch)[pos]))


def _abort(bundle: NetworkBundle, losses: dict):
    """Save the current (still finite) state and stop. Called before any
    update that would use a non-finite loss or gradient."""
    path = None
    if bundle.config.checkpoint_dir:
        path = Path(bundle.config.checkpoint_dir) / f"{bundle.kind}_last_good.ckpt"
        checkpoint_save(bundle, path)
    raise TrainingDiverged(f"non-finite loss at step {bundle.step}: {losses}", path)


def _check_grads(bundle: NetworkBundle, params, losses: dict, clip=0.0):
    """Abort on a non-finite gradient, then rescale the gradients to norm
    ``clip`` when they exceed it (0 disables)."""
    params = [p for p in params if p.grad is not None]
    if not all(bool(torch.isfinite(p.grad).all()) for p in params):
        _abort(bundle, dict(losses, grad="non-finite"))
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)


# --- reflectance generation network ---------------------------------------

def reflectance_losses(model, batch: SceneBatch, generator, adv_weight=rg.ADV_WEIGHT,
                       rec_reduction="sum"):
    """Both branches on one batch; returns (supervised, unsupervised, total)."""
    sup = rg.supervised_step(model, batch, generator, rec_reduction)
    unsup = rg.unsupervised_step(model, batch, sup.code, generator)
    total = rg.total_generator_loss(sup.rec, sup.kl_gt, unsup.kl_pre, unsup.adv, adv_weight)
    return sup, unsup, total


def reflectance_step(bundle: NetworkBundle, batch: SceneBatch, trace=None) -> dict:
    """One alternating update: D_a first, then {E, G} on the total loss."""
    model, config = bundle.model, bundle.config
    gen = _step_generator(config, bundle.step)
    sup, unsup, total = reflectance_losses(model, batch, gen, config.adv_weight, config.rec_reduction)
    d_loss = rg.discriminator_step(model, batch, unsup.prediction)
    losses = {"rec": sup.rec.item(), "kl_gt": sup.kl_gt.item(), "kl_pre": unsup.kl_pre.item(),
              "adv_eg": unsup.adv.item(), "adv_da": d_loss.item(), "total": total.item()}
    if not all(math.isfinite(v) for v in losses.values()):
        _abort(bundle, losses)

    opt_eg, opt_d = bundle.optimizers["EG"], bundle.optimizers["D"]
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward(inputs=list(model.D.parameters()))
    _check_grads(bundle, model.D.parameters(), losses, config.grad_clip)
    opt_d.step()
    if trace is not None:
        trace.append("D")

    # The adversarial term is re-scored by the updated discriminator. The sum
    # is taken in float64 so the logged total is exactly its logged parts.
    adv = rg.lsgan_g_loss(model.D(unsup.prediction, batch.composite, batch.mask))
    total = rg.total_generator_loss(sup.rec.double(), sup.kl_gt.double(), unsup.kl_pre.double(),
                                    adv.double(), config.adv_weight)
    opt_eg.zero_grad(set_to_none=True)
    total.backward(inputs=model.generator_parameters())
    _check_grads(bundle, model.generator_parameters(), losses, config.grad_clip)
    opt_eg.step()
    if trace is not None:
        trace.append("G")
    losses.update(adv_eg=adv.item(), total=total.item())
    bundle.step += 1
    return losses


def train_reflectance(config: TrainConfig, data: SceneBatch, bundle=None, max_steps=None,
                      trace=None, progress=None):
    """Train E, G and D_a; returns the bundle with its loss history attached."""
    bundle = bundle or new_bundle("reflectance", config)
    if len(data) == 0:
        raise ConfigurationError("training needs at least one sample")
    per_epoch, total_steps = _schedule(len(data), config)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    bundle.model.train()
    while bundle.step < total_steps:
        epoch = bundle.step // per_epoch
        row = reflectance_step(bundle, _batch_for_step(data, config, bundle.step, per_epoch), trace)
        row.update(step=bundle.step, epoch=epoch)
        bundle.history.append(row)
        if progress and bundle.step % per_epoch == 0:
            progress(bundle, epoch)
    _final_checkpoint(bundle)
    return bundle


# --- harmonizer -------------------------------------------------------------

def guidance(mode, batch: SceneBatch, reflectance_model=None, generator=None):
    """Reflectance fed to the harmonizer for a guidance mode (None = zeros)."""
    if mode == "base":
        return None
    if mode == "gt":
        return batch.reflectance
    if mode == "fg":
        return batch.fg_only_reflectance
    if mode == "pred":
        if reflectance_model is None:
            raise ConfigurationError("pred mode needs a trained reflectance model")
        with torch.no_grad():
            code = rg.encode(reflectance_model, batch.composite, batch.mask)
            z = rg.reparameterize(code, generator)
            return rg.generate(reflectance_model, batch.composite, batch.mask, z) * batch.mask
    raise ConfigurationError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")


def harmonizer_step(bundle: NetworkBundle, batch: SceneBatch, reflectance_model=None) -> dict:
    config = bundle.config
    gen = _step_generator(config, bundle.step)
    guide = guidance(bundle.mode, batch, reflectance_model, gen)
    pred = harmonize(bundle.model, batch.composite, batch.mask, guide)
    loss = harmonization_loss(pred, batch.ground_truth, batch.mask)
    if not math.isfinite(loss.item()):
        _abort(bundle, {"harm": loss.item()})
    opt = bundle.optimizers["H"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    _check_grads(bundle, bundle.model.parameters(), {"harm": loss.item()})
    opt.step()
    bundle.step += 1
    return {"harm": loss.item()}


def train_harmonizer(config: TrainConfig, data: SceneBatch, mode: str, reflectance_model=None,
                     bundle=None, max_steps=None, progress=None):
    if mode not in GUIDANCE_MODES:
        raise ConfigurationError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")
    if mode == "pred" and reflectance_model is None:
        raise ConfigurationError("pred mode needs a trained reflectance model")
    if len(data) == 0:
        raise ConfigurationError("training needs at least one sample")
    bundle = bundle or new_bundle("harmonizer", config, mode)
    if reflectance_model is not None:
        reflectance_model.eval()
    per_epoch, total_steps = _schedule(len(data), config)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    bundle.model.train()
    while bundle.step < total_steps:
        epoch = bundle.step // per_epoch
        row = harmonizer_step(bundle, _batch_for_step(data, config, bundle.step, per_epoch),
                              reflectance_model)
        row.update(step=bundle.step, epoch=epoch)
        bundle.history.append(row)
        if progress and bundle.step % per_epoch == 0:
            progress(bundle, epoch)
    _final_checkpoint(bundle)
    return bundle


def _final_checkpoint(bundle: NetworkBundle):
    if bundle.config.checkpoint_dir:
        name = bundle.kind if bundle.mode is None else f"{bundle.kind}_{bundle.mode}"
        out = Path(bundle.config.checkpoint_dir)
        checkpoint_save(bundle, out / f"{name}.ckpt")
        if bundle.history:
            write_csv(out / f"{name}_history.csv", bundle.history)


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def epoch_means(history, key) -> list[float]:
    by_epoch = {}
    for row in history:
        by_epoch.setdefault(row["epoch"], []).append(row[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def load_dataset(manifest, validate=True) -> SceneBatch:
    samples = list(manifest_scan(manifest, validate=validate))
    if not samples:
        raise ContractViolation(f"{manifest}: empty dataset")
    return SceneBatch.from_samples(samples)
