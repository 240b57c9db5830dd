"""Stage 1: text-driven editing of label maps in the autoencoder latent space.

The denoiser sees ``[z_t ; E(map)]`` (4 + 4 channels). It is built as a plain
4-channel text-conditioned U-Net whose first convolution is then widened with
zero kernels, so right after widening the map latent has no effect at all.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import MaskAwareAutoencoder
from .checkpoint import load_checkpoint, load_into, save_module, tensor_digest
from .diffusion import NoiseSchedule, SamplerSpec, make_schedule, sample_loop, training_step
from .errors import PolicyError, TrainingError
from .optim import make_optimizer
from .semantic_maps import EYEGLASSES, HAT, SemanticMap, mask_support, palette_decode, palette_encode
from .synth_dataset import EMPTY_TEXT, resolve_class, tokenize
from .unet import CondUNet, UNetConfig

logger = logging.getLogger(__name__)

INSERTABLE_CLASSES = (EYEGLASSES, HAT)


@dataclass(frozen=True)
class MaskUNetConfig:
    latent_channels: int = 4
    widths: tuple = (64, 128, 256)
    attn_levels: tuple = (False, True, True)
    context_dim: int = 128
    time_dim: int = 128
    text_layers: int = 2
    cfg_dropout: float = 0.1

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    def unet_config(self, in_channels: int | None = None) -> UNetConfig:
        return UNetConfig(
            in_channels=self.in_channels if in_channels is None else in_channels,
            out_channels=self.latent_channels,
            widths=self.widths,
            attn_levels=self.attn_levels,
            context_dim=self.context_dim,
            time_dim=self.time_dim,
            text_layers=self.text_layers,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload) -> "MaskUNetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()})


def extend_conv_in(base: nn.Conv2d, extra: int) -> nn.Conv2d:
    """Copy of ``base`` with ``extra`` zero-initialised input channels appended."""
    if extra < 0:
        raise ValueError("extra channels must be non-negative")
    w = base.weight.detach()
    conv = nn.Conv2d(
        base.in_channels + extra, base.out_channels, base.kernel_size,
        stride=base.stride, padding=base.padding, bias=base.bias is not None,
    )
    with torch.no_grad():
        conv.weight.copy_(torch.cat([w, w.new_zeros(w.shape[0], extra, *w.shape[2:])], dim=1))
        if base.bias is not None:
            conv.bias.copy_(base.bias.detach())
    return conv


class MaskDenoiser(nn.Module):
    """eps_theta(z_t, E(S), text, t) over the concatenated latent input."""

    def __init__(self, cfg: MaskUNetConfig = MaskUNetConfig(), unet: CondUNet | None = None):
        super().__init__()
        self.cfg = cfg
        self.unet = unet if unet is not None else CondUNet(cfg.unet_config())

    @classmethod
    def from_base(cls, base: CondUNet, cfg: MaskUNetConfig) -> "MaskDenoiser":
        """Widen a trained/initialised 4-channel denoiser to take the map latent."""
        if base.cfg.in_channels != cfg.latent_channels:
            raise ValueError(f"base takes {base.cfg.in_channels} channels, expected {cfg.latent_channels}")
        unet = copy.deepcopy(base)
        unet.enc.conv_in = extend_conv_in(base.enc.conv_in, cfg.in_channels - base.cfg.in_channels)
        unet.cfg = cfg.unet_config()
        return cls(cfg, unet)

    def forward(self, z_t, t, cond):
        map_latent, text_ids = cond
        return self.unet(torch.cat([z_t, map_latent], dim=1), t, text_ids)

    def predict_eps(self, z_t, map_latent, text_ids, t):
        if not torch.is_tensor(t):
            t = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
        return self(z_t, t, (map_latent, text_ids))

    def conv_in_names(self) -> list[str]:
        return [n for n in self.state_dict() if n.startswith("unet.enc.conv_in.")]

    def frozen_digest(self) -> str:
        """Digest of every parameter except the first convolution."""
        state = self.state_dict()
        skip = set(self.conv_in_names())
        return tensor_digest(state, [n for n in state if n not in skip])


def make_mask_model(cfg: MaskUNetConfig = MaskUNetConfig(), seed: int = 0) -> MaskDenoiser:
    torch.manual_seed(seed)
    base = CondUNet(cfg.unet_config(in_channels=cfg.latent_channels))
    return MaskDenoiser.from_base(base, cfg)


def empty_ids(batch: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([tokenize(EMPTY_TEXT)] * batch))


@torch.no_grad()
def encode_maps(ae: MaskAwareAutoencoder, labels, batch: int = 128) -> torch.Tensor:
    """Scaled latents for a stack of label grids (N x H x W)."""
    labels = np.asarray(labels)
    out = []
    for i in range(0, len(labels), batch):
        x = torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels[i : i + batch]]))
        out.append(ae.encode(x).latent * ae.latent_scale)
    return torch.cat(out) if out else torch.zeros(0)


@dataclass
class MaskTrainResult:
    model: MaskDenoiser
    losses: list


def _train(model, params_filter, z0, cond_lat, text_ids, steps, batch_size, lr, warmup, seed, cfg_dropout, schedule,
           log_every, tag):
    gen = torch.Generator().manual_seed(seed)
    opt, sched = make_optimizer([p for n, p in model.named_parameters() if params_filter(n)], lr=lr, warmup=warmup)
    empty = empty_ids(1)[0]
    losses = []
    model.train()
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(z0), (batch_size,), generator=gen)
        ids = text_ids[idx].clone()
        drop = torch.rand(batch_size, generator=gen) < cfg_dropout
        ids[drop] = empty
        losses.append(training_step(model, z0[idx], (cond_lat[idx], ids), schedule, opt, sched, gen, step))
        if log_every and step % log_every == 0:
            logger.info("%s step %d loss %.5f", tag, step, float(np.mean(losses[-log_every:])))
    model.eval()
    return losses


def train_mask_model(
    ae: MaskAwareAutoencoder,
    s_k,
    s_n,
    edit_ids,
    cfg: MaskUNetConfig = MaskUNetConfig(),
    steps: int = 15000,
    batch_size: int = 16,
    lr: float = 1e-5,
    warmup: int = 500,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    model: MaskDenoiser | None = None,
    log_every: int = 500,
) -> MaskTrainResult:
    """Full-parameter training on (S_k -> S_n, edit text) pairs; the AE stays frozen."""
    schedule = schedule or make_schedule()
    z0 = encode_maps(ae, s_n)
    cond = encode_maps(ae, s_k)
    ids = torch.as_tensor(np.asarray(edit_ids), dtype=torch.long)
    model = model if model is not None else make_mask_model(cfg, seed)
    losses = _train(model, lambda n: True, z0, cond, ids, steps, batch_size, lr, warmup, seed, cfg.cfg_dropout,
                    schedule, log_every, "mask")
    return MaskTrainResult(model, losses)


def finetune_insertion(
    base: MaskDenoiser,
    ae: MaskAwareAutoencoder,
    s_k,
    s_n,
    edit_ids,
    steps: int = 3000,
    batch_size: int = 16,
    lr: float = 1e-5,
    warmup: int = 500,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    log_every: int = 500,
) -> MaskTrainResult:
    """Copy ``base`` and train only its first convolution on insertion pairs."""
    schedule = schedule or make_schedule()
    model = copy.deepcopy(base)
    names = set(model.conv_in_names())
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
    digest = model.frozen_digest()
    z0 = encode_maps(ae, s_n)
    cond = encode_maps(ae, s_k)
    ids = torch.as_tensor(np.asarray(edit_ids), dtype=torch.long)
    losses = _train(model, lambda n: n in names, z0, cond, ids, steps, batch_size, lr, warmup, seed,
                    model.cfg.cfg_dropout, schedule, log_every, "insert")
    if model.frozen_digest() != digest:
        raise TrainingError("parameters outside conv_in changed during insertion fine-tuning")
    for p in model.parameters():
        p.requires_grad_(True)
    return MaskTrainResult(model, losses)


@dataclass(frozen=True)
class EditTask:
    """One stage-1 request.

    ``mask_aware_decode`` defaults to on for edits and off for insertions;
    asking for it on an insertion is rejected.
    """

    mode: str
    cond_map: SemanticMap
    edit_text: str
    user_mask: np.ndarray | None = None
    mask_aware_decode: bool | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("edit", "insert"):
            raise ValueError(f"mode must be 'edit' or 'insert', got {self.mode!r}")
        if self.mode == "insert" and self.mask_aware_decode:
            raise PolicyError("mask-aware decoding is disabled for insertion; drop mask_aware_decode")
        if self.mask_aware_decode is None:
            object.__setattr__(self, "mask_aware_decode", self.mode == "edit")
        if self.user_mask is not None:
            mask = np.asarray(self.user_mask).astype(bool)
            if mask.shape != self.cond_map.labels.shape:
                raise ValueError(f"user mask {mask.shape} does not match map {self.cond_map.labels.shape}")
            object.__setattr__(self, "user_mask", mask)

    @property
    def target_class(self) -> int:
        return resolve_class(self.edit_text)

    def decode_mask(self) -> np.ndarray:
        """Region M for gated decoding: the user's mask, else the target's current support."""
        if self.user_mask is not None:
            return self.user_mask
        return mask_support(self.cond_map, self.target_class)


@torch.no_grad()
def generate_masks(
    tasks,
    ae: MaskAwareAutoencoder,
    model: MaskDenoiser,
    sampler: SamplerSpec = SamplerSpec(),
    schedule: NoiseSchedule | None = None,
    chunk: int = 64,
) -> list[SemanticMap]:
    schedule = schedule or make_schedule()
    tasks = list(tasks)
    for task in tasks:
        task.target_class  # noqa: B018 - raises VocabularyError on unknown/ambiguous text
    model.eval()
    ae.eval()
    results = []
    for start in range(0, len(tasks), chunk):
        part = tasks[start : start + chunk]
        labels = np.stack([t.cond_map.labels for t in part])
        cond_lat = encode_maps(ae, labels)
        ids = torch.from_numpy(np.stack([tokenize(t.edit_text) for t in part]))
        seeds = [sampler.seed if t.seed is None else t.seed for t in part]
        z = sample_loop(model, (cond_lat, ids), sampler, schedule, tuple(cond_lat.shape), uncond=(cond_lat, empty_ids(len(part))), seeds=seeds)
        latent = z / ae.latent_scale
        out = ae.decode(latent)
        aware = [i for i, t in enumerate(part) if t.mask_aware_decode]
        if aware:
            x_cond = torch.from_numpy(np.stack([palette_encode(part[i].cond_map) for i in aware]))
            masks = torch.from_numpy(np.stack([part[i].decode_mask() for i in aware])).float()
            aux = ae.encode_aux(x_cond)
            out[aware] = ae.decode_mask_aware(latent[aware], aux, masks)
        results.extend(palette_decode(o.numpy()) for o in out)
    return results


def generate_mask(task: EditTask, ae, model, sampler: SamplerSpec = SamplerSpec(), schedule=None) -> SemanticMap:
    return generate_masks([task], ae, model, sampler, schedule)[0]


def save_mask_model(path, model: MaskDenoiser, **meta) -> None:
    save_module(path, model, model.cfg.to_dict(), **meta)


def load_mask_model(path) -> MaskDenoiser:
    _, meta = load_checkpoint(path)
    model = MaskDenoiser(MaskUNetConfig.from_dict(meta["config"]))
    load_into(model, path)
    model.eval()
    return model
