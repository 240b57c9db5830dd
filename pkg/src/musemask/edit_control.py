"""Stage 2: repaint an image region so it follows a new label map.

A frozen pixel-space inpainting denoiser (noisy image, masked reference, hole
mask -> 7 input channels) is steered by a trainable copy of its encoder that
also sees the palette-encoded label map. Every copied block feeds the frozen
decoder through a zero-initialised 1x1 convolution, so before training the
pair behaves exactly like the base model.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .checkpoint import load_checkpoint, load_into, save_module, tensor_digest
from .diffusion import NoiseSchedule, SamplerSpec, make_schedule, q_sample, sample_loop, training_step
from .errors import TrainingError
from .mask_unet import empty_ids
from .optim import make_optimizer
from .semantic_maps import SemanticMap, palette_encode
from .unet import CondUNet, UNetConfig

logger = logging.getLogger(__name__)

# input channel layout: [noisy image (3) | masked reference (3) | hole mask (1)]
NOISY, MASKED_REF, HOLE = slice(0, 3), slice(3, 6), slice(6, 7)
EDIT_DILATION = 2


@dataclass(frozen=True)
class BaseEditConfig:
    widths: tuple = (64, 128, 256)
    attn_levels: tuple = (False, True, True)
    context_dim: int = 128
    time_dim: int = 128
    text_layers: int = 2
    cfg_dropout: float = 0.1
    hole_area: tuple = (0.10, 0.50)
    hint_widths: tuple = (16, 16, 32)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_channels=7, out_channels=3, widths=self.widths, attn_levels=self.attn_levels,
            context_dim=self.context_dim, time_dim=self.time_dim, text_layers=self.text_layers,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload) -> "BaseEditConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()})


def image_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (B x) H x W x 3 -> float (B x) 3 x H x W in [-1, 1]."""
    x = torch.from_numpy(np.asarray(images, dtype=np.float32) / 127.5 - 1.0)
    return x.movedim(-1, -3).contiguous()


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    x = ((x.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.movedim(-3, -1).cpu().numpy()


def build_input(z_t: torch.Tensor, reference: torch.Tensor, hole: torch.Tensor) -> torch.Tensor:
    """Stack the 7-channel input; ``hole`` is B x 1 x H x W with 1 = repaint."""
    return torch.cat([z_t, reference * (1.0 - hole), hole], dim=1)


class InpaintDenoiser(nn.Module):
    """Frozen-able base: eps(z_t, t, caption, masked reference, hole)."""

    def __init__(self, cfg: BaseEditConfig = BaseEditConfig()):
        super().__init__()
        self.cfg = cfg
        self.unet = CondUNet(cfg.unet_config())

    def forward(self, z_t, t, cond, residuals=None):
        text_ids, reference, hole = cond[:3]
        return self.unet(build_input(z_t, reference, hole), t, text_ids, residuals)


def zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class HintEncoder(nn.Module):
    """Four convs from the 3-channel palette map to the first-level width."""

    def __init__(self, out_channels: int, widths=(16, 16, 32)):
        super().__init__()
        a, b, c = widths
        self.body = nn.Sequential(
            nn.Conv2d(3, a, 3, padding=1), nn.SiLU(),
            nn.Conv2d(a, b, 3, padding=1), nn.SiLU(),
            nn.Conv2d(b, c, 3, padding=1), nn.SiLU(),
        )
        self.out = nn.Conv2d(c, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.body(x))


class ControlBranch(nn.Module):
    def __init__(self, base: InpaintDenoiser):
        super().__init__()
        cfg = base.cfg
        self.encoder = copy.deepcopy(base.unet.enc)
        self.hint = HintEncoder(cfg.widths[0], cfg.hint_widths)
        self.zero_convs = nn.ModuleList([zero_conv(w) for w in cfg.widths])
        self.zero_mid = zero_conv(cfg.widths[-1])
        self.encoder.requires_grad_(True)

    def forward(self, x7, temb, ctx, map_enc):
        skips, mid = self.encoder(x7, temb, ctx, extra=self.hint(map_enc))
        return [zc(s) for zc, s in zip(self.zero_convs, skips)], self.zero_mid(mid)

    def zero_parameters(self):
        for conv in [*self.zero_convs, self.zero_mid]:
            yield conv.weight
            yield conv.bias


class ControlledEditor(nn.Module):
    """Frozen base + control branch; ``cond = (text_ids, reference, hole, map_enc)``."""

    def __init__(self, base: InpaintDenoiser, branch: ControlBranch | None = None):
        super().__init__()
        self.base = base
        self.branch = branch if branch is not None else ControlBranch(base)
        self.base.requires_grad_(False)

    def forward(self, z_t, t, cond, use_control: bool = True):
        text_ids, reference, hole, map_enc = cond
        x7 = build_input(z_t, reference, hole)
        unet = self.base.unet
        temb, ctx = unet.embed(t, text_ids)
        skips, mid = unet.enc(x7, temb, ctx)
        if use_control:
            extra_skips, extra_mid = self.branch(x7, temb, ctx, map_enc)
            skips = [s + r for s, r in zip(skips, extra_skips)]
            mid = mid + extra_mid
        return unet.dec(skips, mid, temb, ctx)

    def base_digest(self) -> str:
        return tensor_digest(self.base.state_dict())


def make_control_branch(base: InpaintDenoiser) -> ControlledEditor:
    return ControlledEditor(base, ControlBranch(base))


def random_holes(batch: int, height: int, width: int, area=(0.10, 0.50), generator=None) -> torch.Tensor:
    """Axis-aligned rectangles covering a uniform 10-50 % of the canvas."""
    holes = torch.zeros(batch, 1, height, width)
    frac = torch.empty(batch).uniform_(area[0], area[1], generator=generator)
    aspect = torch.empty(batch).uniform_(0.5, 2.0, generator=generator)
    for i in range(batch):
        h = int(round(min(height, max(1.0, float((frac[i] * height * width * aspect[i]) ** 0.5)))))
        w = int(round(min(width, max(1.0, float(frac[i]) * height * width / h))))
        y = int(torch.randint(0, height - h + 1, (1,), generator=generator))
        x = int(torch.randint(0, width - w + 1, (1,), generator=generator))
        holes[i, 0, y : y + h, x : x + w] = 1.0
    return holes


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx**2 + yy**2 <= radius**2


def dilate(mask: np.ndarray, radius: int = EDIT_DILATION) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0 or not mask.any():
        return mask.copy()
    if mask.ndim == 3:
        return np.stack([dilate(m, radius) for m in mask])
    return ndimage.binary_dilation(mask, structure=_disk(radius))


def class_region(labels: np.ndarray, class_id: int) -> np.ndarray:
    return dilate(labels == class_id)


@dataclass
class EditTrainResult:
    model: nn.Module
    losses: list


def _caption_dropout(ids: torch.Tensor, rate: float, generator) -> torch.Tensor:
    ids = ids.clone()
    drop = torch.rand(len(ids), generator=generator) < rate
    ids[drop] = empty_ids(1)[0]
    return ids


def train_base(
    images: np.ndarray,
    caption_ids,
    cfg: BaseEditConfig = BaseEditConfig(),
    steps: int = 8000,
    batch_size: int = 16,
    lr: float = 1e-5,
    warmup: int = 500,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    log_every: int = 500,
) -> EditTrainResult:
    """Self-supervised inpainting on rendered images with random rectangular holes."""
    schedule = schedule or make_schedule()
    torch.manual_seed(seed)
    model = InpaintDenoiser(cfg)
    x_all = image_to_tensor(images)
    ids_all = torch.as_tensor(np.asarray(caption_ids), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    opt, sched = make_optimizer(model.parameters(), lr=lr, warmup=warmup)
    height, width = x_all.shape[-2:]
    losses = []
    model.train()
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(x_all), (batch_size,), generator=gen)
        x0 = x_all[idx]
        holes = random_holes(batch_size, height, width, cfg.hole_area, gen)
        ids = _caption_dropout(ids_all[idx], cfg.cfg_dropout, gen)
        losses.append(training_step(model, x0, (ids, x0, holes), schedule, opt, sched, gen, step))
        if log_every and step % log_every == 0:
            logger.info("edit base step %d loss %.5f", step, float(np.mean(losses[-log_every:])))
    model.eval()
    return EditTrainResult(model, losses)


def attribute_holes(labels: np.ndarray, generator: torch.Generator) -> torch.Tensor:
    """Dilated region of one randomly chosen non-background class per map."""
    holes = np.zeros((len(labels), 1, *labels.shape[1:]), dtype=np.float32)
    for i, lab in enumerate(labels):
        present = [c for c in np.unique(lab) if c != 0]
        c = present[int(torch.randint(0, len(present), (1,), generator=generator))]
        holes[i, 0] = class_region(lab, int(c))
    return torch.from_numpy(holes)


def train_control(
    base: InpaintDenoiser,
    images: np.ndarray,
    labels: np.ndarray,
    caption_ids,
    steps: int = 8000,
    batch_size: int = 16,
    lr: float = 1e-5,
    warmup: int = 500,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    editor: ControlledEditor | None = None,
    log_every: int = 500,
) -> EditTrainResult:
    """Optimise only the control branch; the base must come out bit-identical."""
    schedule = schedule or make_schedule()
    torch.manual_seed(seed)
    editor = editor if editor is not None else make_control_branch(base)
    digest = editor.base_digest()
    x_all = image_to_tensor(images)
    maps_all = torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels]))
    ids_all = torch.as_tensor(np.asarray(caption_ids), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    opt, sched = make_optimizer(editor.branch.parameters(), lr=lr, warmup=warmup)
    losses = []
    editor.base.eval()
    editor.branch.train()
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(x_all), (batch_size,), generator=gen)
        x0 = x_all[idx]
        holes = attribute_holes(labels[idx.numpy()], gen)
        ids = _caption_dropout(ids_all[idx], base.cfg.cfg_dropout, gen)
        losses.append(training_step(editor, x0, (ids, x0, holes, maps_all[idx]), schedule, opt, sched, gen, step))
        if log_every and step % log_every == 0:
            logger.info("control step %d loss %.5f", step, float(np.mean(losses[-log_every:])))
    if editor.base_digest() != digest:
        raise TrainingError("frozen base parameters changed during control training")
    editor.eval()
    return EditTrainResult(editor, losses)


def edit_region(s_old: SemanticMap, s_new: SemanticMap, target_class: int | None = None,
                radius: int = EDIT_DILATION) -> np.ndarray:
    changed = s_old.labels != s_new.labels
    if target_class is not None:
        changed |= (s_old.labels == target_class) ^ (s_new.labels == target_class)
    return dilate(changed, radius)


@dataclass
class EditResult:
    image: np.ndarray
    region: np.ndarray
    noop: bool


@torch.no_grad()
def edit_images(
    references,
    old_maps,
    new_maps,
    caption_ids,
    editor: ControlledEditor,
    sampler: SamplerSpec = SamplerSpec(),
    schedule: NoiseSchedule | None = None,
    seeds=None,
    target_classes=None,
    chunk: int = 32,
) -> list[EditResult]:
    """Batched :func:`edit_image`; requests with an empty region are returned untouched."""
    schedule = schedule or make_schedule()
    n = len(references)
    seeds = [sampler.seed] * n if seeds is None else list(seeds)
    target_classes = [None] * n if target_classes is None else list(target_classes)
    regions = [edit_region(o, s, c) for o, s, c in zip(old_maps, new_maps, target_classes)]
    results: list[EditResult | None] = [None] * n
    todo = []
    for i in range(n):
        if regions[i].any():
            todo.append(i)
        else:
            results[i] = EditResult(np.array(references[i], copy=True), regions[i], True)
    editor.eval()
    for start in range(0, len(todo), chunk):
        part = todo[start : start + chunk]
        ref = image_to_tensor(np.stack([references[i] for i in part]))
        hole = torch.from_numpy(np.stack([regions[i] for i in part]).astype(np.float32))[:, None]
        map_enc = torch.from_numpy(np.stack([palette_encode(new_maps[i]) for i in part]))
        ids = torch.as_tensor(np.stack([caption_ids[i] for i in part]), dtype=torch.long)
        cond = (ids, ref, hole, map_enc)
        uncond = (empty_ids(len(part)), ref, hole, map_enc)
        x = sample_loop(editor, cond, sampler, schedule, tuple(ref.shape), uncond=uncond, seeds=[seeds[i] for i in part],
                        clip=1.0)
        generated = tensor_to_image(x)
        for j, i in enumerate(part):
            out = np.array(references[i], copy=True)
            out[regions[i]] = generated[j][regions[i]]
            results[i] = EditResult(out, regions[i], False)
    return results


def edit_image(reference, s_old, s_new, caption_ids, editor, sampler: SamplerSpec = SamplerSpec(), schedule=None,
               target_class: int | None = None) -> EditResult:
    """Repaint the dilated changed region of ``reference`` to follow ``s_new``.

    Pixels outside the region are copied from ``reference`` byte for byte.
    """
    return edit_images([reference], [s_old], [s_new], [caption_ids], editor, sampler, schedule,
                       target_classes=[target_class])[0]


def save_edit_base(path, model: InpaintDenoiser, **meta) -> None:
    save_module(path, model, model.cfg.to_dict(), **meta)


def load_edit_base(path) -> InpaintDenoiser:
    _, meta = load_checkpoint(path)
    model = InpaintDenoiser(BaseEditConfig.from_dict(meta["config"]))
    load_into(model, path)
    model.eval()
    return model


def save_control(path, editor: ControlledEditor, **meta) -> None:
    save_module(path, editor.branch, editor.base.cfg.to_dict(), **meta)


def load_control(path, base: InpaintDenoiser) -> ControlledEditor:
    editor = make_control_branch(base)
    load_into(editor.branch, path)
    editor.eval()
    return editor


@torch.no_grad()
def conditioning_losses(editor: ControlledEditor, images, labels, caption_ids, schedule=None, seed: int = 0,
                        batch: int = 32) -> tuple[float, float]:
    """Held-out eps MSE with and without the control branch on identical noise."""
    schedule = schedule or make_schedule()
    gen = torch.Generator().manual_seed(seed)
    x_all = image_to_tensor(images)
    holes = attribute_holes(labels, gen)
    t_all = torch.randint(1, schedule.T + 1, (len(x_all),), generator=gen)
    eps_all = torch.randn(x_all.shape, generator=gen)
    maps_all = torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels]))
    ids_all = torch.as_tensor(np.asarray(caption_ids), dtype=torch.long)
    sums = [0.0, 0.0]
    for i in range(0, len(x_all), batch):
        sl = slice(i, i + batch)
        z_t = q_sample(x_all[sl], t_all[sl], eps_all[sl], schedule).float()
        cond = (ids_all[sl], x_all[sl], holes[sl], maps_all[sl])
        for k, use in enumerate((True, False)):
            pred = editor(z_t, t_all[sl], cond, use_control=use)
            sums[k] += float(((pred - eps_all[sl]) ** 2).sum())
    return sums[0] / eps_all.numel(), sums[1] / eps_all.numel()
