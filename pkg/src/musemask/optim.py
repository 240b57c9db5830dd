"""AdamW with linear warm-up, the optimizer every trainer in the package uses."""

from __future__ import annotations

import torch

DEFAULT_LR = 1e-5
DEFAULT_WARMUP = 500
DEFAULT_WEIGHT_DECAY = 1e-2
DEFAULT_BETAS = (0.9, 0.999)


def make_optimizer(params, lr=DEFAULT_LR, warmup=DEFAULT_WARMUP, weight_decay=DEFAULT_WEIGHT_DECAY, betas=DEFAULT_BETAS):
    params = [p for p in params if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    )
    return optimizer, scheduler


def set_determinism(threads: int | None = 1) -> None:
    """Single-thread, deterministic kernels: reruns reproduce losses bit for bit."""
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
