"""Latent autoencoder over palette-encoded label maps with mask-aware skips.

The decoder can optionally receive features from an auxiliary encoding of a
second map (the map with the edited attribute removed). At every decoder
level those features go through a small conv module and are added to the
decoder activations, gated by the complement of the edit mask so that only
the unedited region is pulled towards the auxiliary map.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_into, save_module, tensor_digest
from .errors import ShapeError, TrainingError
from .optim import make_optimizer

logger = logging.getLogger(__name__)

PERCEPTUAL_SEED = 1234
PERCEPTUAL_WIDTHS = (16, 32, 64, 64)


@dataclass(frozen=True)
class AEConfig:
    in_channels: int = 3
    latent_channels: int = 4
    widths: tuple = (32, 64, 128)
    nonlinearity: str = "silu"
    mask_aware: str = "nonlinear"  # "none" | "nonlinear"
    gated: bool = True
    shared_aux_encoder: bool = True

    def __post_init__(self):
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ValueError("three positive level widths are required (factor-4 downsampling)")
        if self.mask_aware not in ("none", "nonlinear"):
            raise ValueError(f"mask_aware must be 'none' or 'nonlinear', got {self.mask_aware!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _act(name: str) -> nn.Module:
    return {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU}[name]()


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, act: str = "silu"):
        super().__init__()
        self.body = nn.Sequential(
            _norm(cin), _act(act), nn.Conv2d(cin, cout, 3, padding=1),
            _norm(cout), _act(act), nn.Conv2d(cout, cout, 3, padding=1),
        )
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.body(x)


@dataclass
class EncoderTaps:
    """Per-level encoder features (full, 1/2, 1/4 resolution) and the latent."""

    features: list
    latent: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        a = cfg.nonlinearity
        self.conv_in = nn.Conv2d(cfg.in_channels, w0, 3, padding=1)
        self.levels = nn.ModuleList([ResBlock(w0, w0, a), ResBlock(w0, w1, a), ResBlock(w1, w2, a)])
        self.downs = nn.ModuleList([nn.Conv2d(w0, w0, 3, stride=2, padding=1), nn.Conv2d(w1, w1, 3, stride=2, padding=1)])
        self.mid = ResBlock(w2, w2, a)
        self.out = nn.Sequential(_norm(w2), _act(a), nn.Conv2d(w2, cfg.latent_channels, 3, padding=1))

    def forward(self, x) -> EncoderTaps:
        h = self.conv_in(x)
        taps = []
        for i, level in enumerate(self.levels):
            if i > 0:
                h = self.downs[i - 1](h)
            h = level(h)
            taps.append(h)
        return EncoderTaps(taps, self.out(self.mid(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        a = cfg.nonlinearity
        self.conv_in = nn.Conv2d(cfg.latent_channels, w2, 3, padding=1)
        self.mid = ResBlock(w2, w2, a)
        # levels are stored coarse -> fine; level index i matches encoder tap i
        self.levels = nn.ModuleDict({"2": ResBlock(w2, w2, a), "1": ResBlock(w1, w1, a), "0": ResBlock(w0, w0, a)})
        self.ups = nn.ModuleDict({"1": nn.Conv2d(w2, w1, 3, padding=1), "0": nn.Conv2d(w1, w0, 3, padding=1)})
        self.out = nn.Sequential(_norm(w0), _act(a), nn.Conv2d(w0, cfg.in_channels, 3, padding=1))

    def forward(self, latent, merge=None):
        """``merge(i, h)`` may add a skip contribution after decoder level ``i``."""
        h = self.mid(self.conv_in(latent))
        for i in (2, 1, 0):
            if i < 2:
                h = self.ups[str(i)](F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = self.levels[str(i)](h)
            if merge is not None:
                h = merge(i, h)
        return self.out(h)


class SkipModule(nn.Module):
    """conv3x3 -> nonlinearity -> conv3x3 whose output weights start at zero."""

    def __init__(self, channels: int, act: str = "silu"):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = _act(act)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


def resize_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize of a B x 1 x H x W (or H x W) mask."""
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    return F.interpolate(mask.float(), size=tuple(size), mode="nearest")


def mask_aware_merge(prev: torch.Tensor, skip_features: torch.Tensor, mask: torch.Tensor | None, gated: bool = True):
    """``prev + skip * (1 - resize(mask))`` when gated, ``prev + skip`` otherwise."""
    if not gated or mask is None:
        return prev + skip_features
    keep = 1.0 - resize_mask(mask, prev.shape[-2:])
    return prev + skip_features * keep


class MaskAwareAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig = AEConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.skips = None
        self.aux_encoder = None
        if cfg.mask_aware == "nonlinear":
            self.skips = nn.ModuleList([SkipModule(w, cfg.nonlinearity) for w in cfg.widths])
            if not cfg.shared_aux_encoder:
                self.aux_encoder = Encoder(cfg)
        self.register_buffer("latent_scale", torch.ones(()))

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected B x {self.cfg.in_channels} x H x W, got {tuple(x.shape)}")
        f = self.cfg.downsample
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {f}")

    def encode(self, x: torch.Tensor) -> EncoderTaps:
        self._check(x)
        return self.encoder(x)

    def encode_aux(self, x: torch.Tensor) -> EncoderTaps:
        self._check(x)
        return (self.aux_encoder or self.encoder)(x)

    def _check_latent(self, latent):
        if latent.dim() != 4 or latent.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected B x {self.cfg.latent_channels} x h x w latent, got {tuple(latent.shape)}")

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        self._check_latent(latent)
        return self.decoder(latent)

    def decode_mask_aware(self, latent, aux: EncoderTaps, mask, gated: bool | None = None) -> torch.Tensor:
        self._check_latent(latent)
        if self.skips is None:
            raise ShapeError("this autoencoder was built without mask-aware skip modules")
        gated = self.cfg.gated if gated is None else gated
        out_size = tuple(d * self.cfg.downsample for d in latent.shape[-2:])
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None]
            if tuple(mask.shape[-2:]) != out_size:
                raise ShapeError(f"mask {tuple(mask.shape[-2:])} does not match output size {out_size}")
            mask = mask.reshape(mask.shape[0], 1, *out_size).float()

        def merge(i, h):
            return mask_aware_merge(h, self.skips[i](aux.features[i]), mask, gated)

        return self.decoder(latent, merge)

    def base_parameter_names(self) -> list[str]:
        return [n for n in self.state_dict() if n.startswith(("encoder.", "decoder."))]

    def base_digest(self) -> str:
        return tensor_digest(self.state_dict(), self.base_parameter_names())


class PerceptualNet(nn.Module):
    """Frozen random strided-conv feature stack used as the perceptual term.

    Weights come from a fixed numpy seed so they never change between runs or
    torch versions.
    """

    def __init__(self, seed: int = PERCEPTUAL_SEED, widths=PERCEPTUAL_WIDTHS):
        super().__init__()
        rng = np.random.default_rng(seed)
        layers, cin = [], 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            std = np.sqrt(2.0 / (cin * 9))
            conv.weight.data = torch.from_numpy((rng.standard_normal((w, cin, 3, 3)) * std).astype(np.float32))
            conv.bias.data.zero_()
            layers.append(conv)
            cin = w
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


_PERCEPTUAL: PerceptualNet | None = None


def perceptual_net() -> PerceptualNet:
    global _PERCEPTUAL
    if _PERCEPTUAL is None:
        _PERCEPTUAL = PerceptualNet()
    return _PERCEPTUAL


def perceptual_features(x: torch.Tensor) -> list:
    if x.dim() == 3:
        x = x[None]
    return perceptual_net()(x)


def ae_loss(target: torch.Tensor, pred: torch.Tensor, lambda1: float = 1.0, lambda2: float = 0.1) -> torch.Tensor:
    """L1 plus mean-over-levels squared feature distance."""
    if target.shape != pred.shape:
        raise ShapeError(f"shape mismatch {tuple(target.shape)} vs {tuple(pred.shape)}")
    loss = lambda1 * (target - pred).abs().mean()
    if lambda2:
        ft, fp = perceptual_features(target), perceptual_features(pred)
        loss = loss + lambda2 * torch.stack([((a - b) ** 2).mean() for a, b in zip(ft, fp)]).mean()
    return loss


@dataclass
class AETrainResult:
    model: MaskAwareAutoencoder
    losses: list


def _batches(n: int, batch_size: int, steps: int, generator: torch.Generator):
    for _ in range(steps):
        yield torch.randint(0, n, (batch_size,), generator=generator)


def _check_loss(loss: torch.Tensor, step: int) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingError("loss became non-finite", step)
    return value


@torch.no_grad()
def estimate_latent_scale(model: MaskAwareAutoencoder, encoded: torch.Tensor, limit: int = 512) -> float:
    model.eval()
    lat = torch.cat([model.encode(chunk).latent for chunk in encoded[:limit].split(64)])
    return float(1.0 / lat.std())


def train_ae_base(
    encoded_maps: torch.Tensor,
    cfg: AEConfig = AEConfig(),
    steps: int = 3000,
    batch_size: int = 16,
    lr: float = 1e-3,
    warmup: int = 100,
    seed: int = 0,
    lambdas=(1.0, 0.1),
    log_every: int = 100,
) -> AETrainResult:
    """Phase 0: fit encoder + decoder on palette-encoded maps (N x 3 x H x W)."""
    torch.manual_seed(seed)
    model = MaskAwareAutoencoder(cfg)
    gen = torch.Generator().manual_seed(seed)
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt, sched = make_optimizer(params, lr=lr, warmup=warmup, weight_decay=0.0)
    losses = []
    model.train()
    for step, idx in enumerate(_batches(len(encoded_maps), batch_size, steps, gen), start=1):
        x = encoded_maps[idx]
        loss = ae_loss(x, model.decode(model.encode(x).latent), *lambdas)
        losses.append(_check_loss(loss, step))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            logger.info("ae base step %d loss %.5f", step, float(np.mean(losses[-log_every:])))
    if steps > 0 and len(encoded_maps):
        model.latent_scale.fill_(estimate_latent_scale(model, encoded_maps))
    model.eval()
    return AETrainResult(model, losses)


def train_skip_modules(
    base: MaskAwareAutoencoder,
    target_maps: torch.Tensor,
    aux_maps: torch.Tensor,
    masks: torch.Tensor,
    gated: bool = True,
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 1e-3,
    warmup: int = 100,
    seed: int = 0,
    lambdas=(1.0, 0.1),
    log_every: int = 100,
) -> AETrainResult:
    """Phase 1: train only the skip modules (and a private aux encoder if configured).

    ``target_maps``/``aux_maps`` are palette-encoded S_n / S_k, ``masks`` the
    binary M_k grids. The base encoder and decoder are frozen and copied, so
    ``base`` itself is never touched.
    """
    cfg = AEConfig(**{**base.cfg.to_dict(), "mask_aware": "nonlinear", "gated": gated})
    torch.manual_seed(seed)
    model = MaskAwareAutoencoder(cfg)
    base_state = {k: v for k, v in base.state_dict().items() if k.startswith(("encoder.", "decoder.")) or k == "latent_scale"}
    model.load_state_dict(base_state, strict=False)
    if model.aux_encoder is not None:
        model.aux_encoder.load_state_dict(base.encoder.state_dict())
    model.encoder.requires_grad_(False)
    model.decoder.requires_grad_(False)
    digest = model.base_digest()
    gen = torch.Generator().manual_seed(seed)
    trainable = list(model.skips.parameters()) + (list(model.aux_encoder.parameters()) if model.aux_encoder else [])
    opt, sched = make_optimizer(trainable, lr=lr, warmup=warmup, weight_decay=0.0)
    losses = []
    model.train()
    for step, idx in enumerate(_batches(len(target_maps), batch_size, steps, gen), start=1):
        x, aux_x, m = target_maps[idx], aux_maps[idx], masks[idx]
        with torch.no_grad():
            latent = model.encode(x).latent
        aux = model.encode_aux(aux_x)
        loss = ae_loss(x, model.decode_mask_aware(latent, aux, m, gated), *lambdas)
        losses.append(_check_loss(loss, step))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            logger.info("ae skip (gated=%s) step %d loss %.5f", gated, step, float(np.mean(losses[-log_every:])))
    if model.base_digest() != digest:
        raise TrainingError("frozen encoder/decoder parameters changed during skip training")
    model.eval()
    return AETrainResult(model, losses)


def reconstruct(model: MaskAwareAutoencoder, x: torch.Tensor, aux_x=None, mask=None, gated=None, batch: int = 64):
    """Batched no-grad reconstruction; plain decode when ``aux_x`` is None."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            latent = model.encode(x[i : i + batch]).latent
            if aux_x is None:
                outs.append(model.decode(latent))
            else:
                aux = model.encode_aux(aux_x[i : i + batch])
                outs.append(model.decode_mask_aware(latent, aux, mask[i : i + batch], gated))
    return torch.cat(outs) if outs else x.new_zeros(x.shape)


def save_autoencoder(path, model: MaskAwareAutoencoder, **meta) -> None:
    save_module(path, model, model.cfg.to_dict(), **meta)


def load_autoencoder(path) -> MaskAwareAutoencoder:
    from .checkpoint import load_checkpoint

    _, meta = load_checkpoint(path)
    cfg = AEConfig(**meta["config"])
    model = MaskAwareAutoencoder(cfg)
    load_into(model, path)
    model.eval()
    return model


def copy_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
