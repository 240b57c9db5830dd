"""Held-out evaluation of trained artifacts, shared by the ``eval`` command and
the acceptance suite. Every function is deterministic given its seed."""

from __future__ import annotations

import numpy as np
import torch

from .autoencoder import MaskAwareAutoencoder, reconstruct
from .diffusion import SamplerSpec, heldout_eps_loss, make_schedule
from .edit_control import ControlledEditor, conditioning_losses, edit_images
from .mask_unet import INSERTABLE_CLASSES, EditTask, MaskDenoiser, encode_maps, generate_masks
from .metrics import class_area_w1, diversity_score, finite_psnr, mask_accuracy, psnr
from .semantic_maps import EYES, HAIR, MOUTH, NOSE, SemanticMap, palette_decode, palette_encode
from .synth_dataset import CLASS_NAMES, SIZE_WORDS, Corpus, nearest_render_class

EDITABLE_CLASSES = (HAIR, EYES, NOSE, MOUTH)


def encode_labels(labels) -> torch.Tensor:
    return torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels]))


def _map_stats(out: torch.Tensor, target: torch.Tensor, target_labels: np.ndarray) -> dict:
    psnrs = [finite_psnr(psnr(o.numpy(), t.numpy(), max_val=2.0)) for o, t in zip(out, target)]
    labels = np.stack([palette_decode(o.numpy()).labels for o in out])
    return {"psnr": float(np.mean(psnrs)), "acc": float(np.mean(labels == target_labels))}


def autoencoder_report(plain: MaskAwareAutoencoder, gated: MaskAwareAutoencoder, ungated: MaskAwareAutoencoder,
                       corpus: Corpus, limit: int | None = None) -> dict:
    """Reconstruct held-out S_n with plain, gated and ungated decoding (aux = S_k, M = M_k)."""
    sel = np.nonzero(corpus.pair_heldout)[0][:limit]
    target_labels = corpus.s_n[corpus.pair_scene[sel]]
    x = encode_labels(target_labels)
    aux = encode_labels(corpus.s_k[sel])
    masks = torch.from_numpy(corpus.mask_k[sel]).float()
    out = {"plain": _map_stats(reconstruct(plain, x), x, target_labels)}
    out["gated"] = _map_stats(reconstruct(gated, x, aux, masks, True), x, target_labels)
    out["ungated"] = _map_stats(reconstruct(ungated, x, aux, masks, False), x, target_labels)
    out["count"] = int(len(sel))
    return out


def stage1_pairs(corpus: Corpus, split: str, insertable: bool) -> np.ndarray:
    """Pair rows of a split whose class is (or is not) one of the insertable classes."""
    held = corpus.pair_heldout if split == "heldout" else ~corpus.pair_heldout
    ins = np.isin(corpus.pair_class, INSERTABLE_CLASSES)
    return np.nonzero(held & (ins if insertable else ~ins))[0]


def mask_eps_loss(model: MaskDenoiser, ae: MaskAwareAutoencoder, corpus: Corpus, rows, seed: int = 0) -> float:
    z0 = encode_maps(ae, corpus.s_n[corpus.pair_scene[rows]])
    cond = encode_maps(ae, corpus.s_k[rows])
    ids = torch.as_tensor(corpus.edit_ids[rows], dtype=torch.long)
    model.eval()
    return heldout_eps_loss(model, z0, lambda idx: (cond[idx], ids[idx]), make_schedule(), seed=seed)


def resize_text(class_id: int, current: str, rng: np.random.Generator) -> str:
    """An edit text for ``class_id`` whose size word differs from the current one."""
    words = [w for w in SIZE_WORDS[class_id] if w != current.split()[0]]
    return f"{words[rng.integers(len(words))]} {CLASS_NAMES[class_id]}"


def edit_tasks(corpus: Corpus, n: int, seed: int = 0, classes=EDITABLE_CLASSES, with_rows: bool = False):
    """Mask-free resize edits on held-out scenes (conditioning map = full S_n).

    With ``with_rows`` the scene row of every task is returned as well.
    """
    rng = np.random.default_rng(seed)
    rows = np.nonzero(corpus.pair_heldout & np.isin(corpus.pair_class, classes))[0]
    rows = rng.permutation(rows)[:n]
    tasks = []
    for r in rows:
        cond = SemanticMap(corpus.s_n[corpus.pair_scene[r]])
        text = resize_text(int(corpus.pair_class[r]), corpus.edit_texts[r], rng)
        tasks.append(EditTask("edit", cond, text, seed=int(rng.integers(2**31))))
    if with_rows:
        return tasks, [int(corpus.pair_scene[r]) for r in rows]
    return tasks


def insertion_tasks(corpus: Corpus, n: int, seed: int = 0) -> list[EditTask]:
    """Held-out insertion prompts: S_k without the class, its own edit text."""
    rng = np.random.default_rng(seed)
    rows = rng.permutation(stage1_pairs(corpus, "heldout", insertable=True))[:n]
    return [EditTask("insert", SemanticMap(corpus.s_k[r]), corpus.edit_texts[r], seed=int(rng.integers(2**31))) for r in rows]


def outside_agreement(tasks, maps) -> float:
    """Mean fraction of pixels outside each task's decode mask that keep their label."""
    rates = []
    for task, out in zip(tasks, maps):
        outside = ~task.decode_mask()
        rates.append(np.mean(out.labels[outside] == task.cond_map.labels[outside]) if outside.any() else 1.0)
    return float(np.mean(rates))


def insertion_success(tasks, maps, corpus: Corpus, fraction: float = 0.25) -> float:
    hits = []
    for task, out in zip(tasks, maps):
        c = task.target_class
        hits.append((out.labels == c).sum() >= fraction * corpus.median_class_area(c))
    return float(np.mean(hits))


def diversity_pairs(tasks, ae, model, sampler: SamplerSpec, seed_offset: int = 7919) -> list[float]:
    """Per task, Hamming distance inside M between two seeds' outputs."""
    second = [EditTask(t.mode, t.cond_map, t.edit_text, t.user_mask, t.mask_aware_decode, t.seed + seed_offset) for t in tasks]
    a = generate_masks(tasks, ae, model, sampler)
    b = generate_masks(second, ae, model, sampler)
    out = []
    for task, x, y in zip(tasks, a, b):
        region = task.decode_mask()
        out.append(diversity_score([x, y], region) if region.any() else 0.0)
    return out


def stage1_report(model: MaskDenoiser, insert_model: MaskDenoiser, ae_gated: MaskAwareAutoencoder, corpus: Corpus,
                  sampler: SamplerSpec, n_edit: int = 64, n_div: int = 50, n_insert: int = 64, seed: int = 0) -> dict:
    rows = stage1_pairs(corpus, "heldout", insertable=False)
    report = {"eps_loss": mask_eps_loss(model, ae_gated, corpus, rows, seed)} if len(rows) else {}
    report["eps_loss_all_pairs"] = mask_eps_loss(model, ae_gated, corpus, np.nonzero(corpus.pair_heldout)[0], seed)
    tasks = edit_tasks(corpus, n_edit, seed)
    div, ins = [], insertion_tasks(corpus, n_insert, seed)
    # metrics without samples are left out rather than reported as NaN
    if tasks:
        maps = generate_masks(tasks, ae_gated, model, sampler)
        report["edit_outside_agreement"] = outside_agreement(tasks, maps)
        report["edit_class_area_w1"] = class_area_w1(maps, [SemanticMap(m) for m in corpus.s_n[corpus.heldout]])
        div = diversity_pairs(tasks[:n_div], ae_gated, model, sampler)
        report["diversity_mean"] = float(np.mean(div))
        report["diversity_nonzero_rate"] = float(np.mean(np.asarray(div) > 0))
    if ins:
        report["insert_success_base"] = insertion_success(ins, generate_masks(ins, ae_gated, model, sampler), corpus)
        report["insert_success_finetuned"] = insertion_success(ins, generate_masks(ins, ae_gated, insert_model, sampler), corpus)
    report["counts"] = {"edit": len(tasks), "diversity": len(div), "insert": len(ins), "eps_pairs": int(len(rows))}
    return report


def stage2_report(editor: ControlledEditor, corpus: Corpus, sampler: SamplerSpec, n_loss: int = 200,
                  n_edit: int = 32, seed: int = 0, ae=None, mask_model=None) -> dict:
    """Conditioning utility on held-out scenes plus an attribute-swap edit check.

    Without stage-1 models the new map is taken from another held-out pair
    (S_k of the same scene, i.e. one attribute removed); with them the new
    map is generated from a resize edit.
    """
    held = np.nonzero(corpus.heldout)[0][:n_loss]
    with_c, without_c = conditioning_losses(editor, corpus.images[held], corpus.s_n[held], corpus.caption_ids[held], seed=seed)
    report = {"loss_conditioned": with_c, "loss_unconditioned": without_c}
    if ae is not None and mask_model is not None:
        tasks, rows = edit_tasks(corpus, n_edit, seed + 1, with_rows=True)
        new_maps = generate_masks(tasks, ae, mask_model, sampler)
        old_maps = [t.cond_map for t in tasks]
        targets = [t.target_class for t in tasks]
    else:
        rng = np.random.default_rng(seed + 1)
        pairs = rng.permutation(np.nonzero(corpus.pair_heldout)[0])[:n_edit]
        rows = [int(corpus.pair_scene[p]) for p in pairs]
        old_maps = [SemanticMap(corpus.s_n[r]) for r in rows]
        new_maps = [SemanticMap(corpus.s_k[p]) for p in pairs]
        targets = [int(corpus.pair_class[p]) for p in pairs]
    results = edit_images([corpus.images[r] for r in rows], old_maps, new_maps, [corpus.caption_ids[r] for r in rows],
                          editor, sampler, target_classes=targets, seeds=[seed + i for i in range(len(rows))])
    inside, outside_ok = [], []
    for res, ref_row, new in zip(results, rows, new_maps):
        outside_ok.append(bool(np.array_equal(res.image[~res.region], corpus.images[ref_row][~res.region])))
        if res.region.any():
            inside.append(mask_accuracy(nearest_render_class(res.image)[res.region], new.labels[res.region]))
    report["edit_inside_agreement"] = float(np.mean(inside)) if inside else 1.0
    report["composite_identity_rate"] = float(np.mean(outside_ok))
    report["counts"] = {"loss": int(len(held)), "edit": len(results)}
    return report


__all__ = [
    "EDITABLE_CLASSES",
    "autoencoder_report",
    "diversity_pairs",
    "edit_tasks",
    "insertion_success",
    "insertion_tasks",
    "mask_eps_loss",
    "outside_agreement",
    "stage1_pairs",
    "stage1_report",
    "stage2_report",
]
