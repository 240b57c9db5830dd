"""Run configuration and the training / inference commands behind the CLI.

A run directory holds everything one configuration produces::

    corpus/               gen-data
    ae_base.mkdf          train-ae
    ae_gated.mkdf         train-skip (plus ae_ungated.mkdf)
    mask_base.mkdf        train-maskdiff
    mask_insert.mkdf      finetune-insert
    edit_base.mkdf        train-base
    edit_control.mkdf     train-control
    logs/<command>.json   run logs
    eval/report.json      eval
"""

from __future__ import annotations

import copy
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AEConfig, load_autoencoder, save_autoencoder, train_ae_base, train_skip_modules
from .checkpoint import config_hash
from .diffusion import SamplerSpec
from .edit_control import (
    BaseEditConfig,
    edit_image,
    load_control,
    load_edit_base,
    make_control_branch,
    save_control,
    save_edit_base,
    train_base,
    train_control,
)
from .errors import ConfigError, MissingArtifactError
from .evaluation import autoencoder_report, encode_labels, stage1_pairs, stage1_report, stage2_report
from .mask_unet import (
    EditTask,
    MaskUNetConfig,
    finetune_insertion,
    generate_mask,
    generate_masks,
    load_mask_model,
    save_mask_model,
    train_mask_model,
)
from .metrics import EvalReport
from .optim import set_determinism
from .semantic_maps import DEFAULT_PALETTE, SemanticMap, read_image, read_map, rle_decode, write_image, write_map
from .synth_dataset import SceneConfig, build_dataset, derive_seed, load_corpus, resolve_class, tokenize

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "ae_base": "ae_base.mkdf",
    "ae_gated": "ae_gated.mkdf",
    "ae_ungated": "ae_ungated.mkdf",
    "mask_base": "mask_base.mkdf",
    "mask_insert": "mask_insert.mkdf",
    "edit_base": "edit_base.mkdf",
    "edit_control": "edit_control.mkdf",
}

# stream offsets for derive_seed(master, ...) so every command draws independent randomness
SEED_STREAMS = {"ae_base": 1, "skip_gated": 2, "skip_ungated": 3, "mask": 4, "insert": 5, "edit_base": 6, "control": 7}

DEFAULTS = {
    "seed": 0,
    "deterministic": True,
    "run_dir": "runs/desk",
    "data": {"n_scenes": 2000, "corpus_dir": None, "scene": SceneConfig().to_dict()},
    "ae": {
        "model": AEConfig(widths=(16, 32, 64)).to_dict(),
        "base_steps": 3000,
        "skip_steps": 2000,
        "batch_size": 16,
        "lr": 1e-3,
        "warmup": 100,
        "lambda1": 1.0,
        "lambda2": 0.1,
    },
    "mask": {
        "model": MaskUNetConfig(widths=(32, 64, 128)).to_dict(),
        "steps": 15000,
        "batch_size": 16,
        "lr": 3e-4,
        "warmup": 500,
        "insert_steps": 3000,
        "insert_lr": 1e-3,
    },
    "edit": {
        "model": BaseEditConfig(widths=(16, 32, 64), attn_levels=(False, False, True)).to_dict(),
        "base_steps": 8000,
        "control_steps": 8000,
        "batch_size": 8,
        "lr": 3e-4,
        "warmup": 500,
    },
    "sampler": {"steps": 50, "guidance_scale": 3.0, "seed": 0},
    "eval": {"n_edit": 64, "n_diversity": 50, "n_insert": 64, "n_stage2_loss": 200, "n_stage2_edit": 32},
}

BUDGET_KEYS = [("ae", "base_steps"), ("ae", "skip_steps"), ("mask", "steps"), ("mask", "insert_steps"),
               ("edit", "base_steps"), ("edit", "control_steps")]


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("scene", "model"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, seed: int | None = None, deterministic: bool | None = None, run_dir=None) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                payload = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigError(f"config file {path} does not exist") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(payload, dict):
                raise ConfigError("config file must hold a JSON object")
            values = _merge(values, payload)
        if seed is not None:
            values["seed"] = int(seed)
        if deterministic:
            values["deterministic"] = True
        if run_dir is not None:
            values["run_dir"] = str(run_dir)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        for section, key in BUDGET_KEYS:
            if not isinstance(v[section][key], int) or v[section][key] < 0:
                raise ConfigError(f"{section}.{key} must be a non-negative integer")
        if not isinstance(v["data"]["n_scenes"], int) or v["data"]["n_scenes"] < 2:
            raise ConfigError("data.n_scenes must be an integer >= 2")
        for section in ("ae", "mask", "edit"):
            if v[section]["batch_size"] < 1 or v[section]["lr"] <= 0:
                raise ConfigError(f"{section}: batch_size and lr must be positive")
        try:
            self.scene_config(), self.ae_config(), self.mask_config(), self.edit_config(), self.sampler()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        return config_hash(self.values)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def stream_seed(self, name: str) -> int:
        return derive_seed(self.seed, SEED_STREAMS[name]) % (2**31)

    @property
    def run_dir(self) -> Path:
        return Path(self.values["run_dir"])

    @property
    def corpus_dir(self) -> Path:
        custom = self.values["data"]["corpus_dir"]
        return Path(custom) if custom else self.run_dir / "corpus"

    def artifact(self, name: str) -> Path:
        return self.run_dir / ARTIFACTS[name]

    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.values["data"]["scene"])

    def ae_config(self) -> AEConfig:
        return AEConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in self.values["ae"]["model"].items()})

    def mask_config(self) -> MaskUNetConfig:
        return MaskUNetConfig.from_dict(self.values["mask"]["model"])

    def edit_config(self) -> BaseEditConfig:
        return BaseEditConfig.from_dict(self.values["edit"]["model"])

    def sampler(self, **overrides) -> SamplerSpec:
        s = {**self.values["sampler"], **{k: v for k, v in overrides.items() if v is not None}}
        return SamplerSpec(steps=int(s["steps"]), guidance_scale=float(s["guidance_scale"]), seed=int(s["seed"]))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_run_log(cfg: RunConfig, command: str, seeds: dict, started: float, losses=None, **extra) -> Path:
    record = {
        "command": command,
        "config_hash": cfg.hash,
        "seeds": seeds,
        "git_describe": git_describe(),
        "elapsed_s": round(time.time() - started, 3),
        "losses": {k: [float(x) for x in v] for k, v in (losses or {}).items()},
        **extra,
    }
    path = cfg.run_dir / "logs" / f"{command}.json"
    atomic_write_text(path, json.dumps(record, sort_keys=True) + "\n")
    return path


def read_run_log(run_dir, command: str) -> dict:
    path = Path(run_dir) / "logs" / f"{command}.json"
    if not path.exists():
        raise MissingArtifactError(f"no run log for {command} at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def require(*paths: Path) -> None:
    """Fail before any work if an input artifact is missing."""
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"required artifact {p} is missing; run the producing command first")


def prepare(cfg: RunConfig) -> None:
    threads = int(os.environ.get("MUSEMASK_THREADS", "0") or 0)
    if cfg.values["deterministic"]:
        set_determinism(1)
    elif threads > 0:
        torch.set_num_threads(threads)


def _corpus(cfg: RunConfig):
    require(cfg.corpus_dir / "manifest.jsonl")
    return load_corpus(cfg.corpus_dir)


def cmd_gen_data(cfg: RunConfig) -> dict:
    started = time.time()
    d = cfg.values["data"]
    records = build_dataset(d["n_scenes"], cfg.scene_config(), cfg.corpus_dir, seed=cfg.seed)
    write_run_log(cfg, "gen-data", {"master": cfg.seed}, started, records=len(records))
    return {"records": len(records), "corpus": str(cfg.corpus_dir)}


def cmd_train_ae(cfg: RunConfig) -> dict:
    started = time.time()
    corpus = _corpus(cfg)
    a = cfg.values["ae"]
    seed = cfg.stream_seed("ae_base")
    x = encode_labels(corpus.s_n[~corpus.heldout])
    res = train_ae_base(x, cfg.ae_config(), steps=a["base_steps"], batch_size=a["batch_size"], lr=a["lr"],
                        warmup=a["warmup"], seed=seed, lambdas=(a["lambda1"], a["lambda2"]))
    save_autoencoder(cfg.artifact("ae_base"), res.model, run_config_hash=cfg.hash, seed=seed)
    write_run_log(cfg, "train-ae", {"ae_base": seed}, started, {"ae_base": res.losses})
    return {"final_loss": res.losses[-1] if res.losses else None}


def cmd_train_skip(cfg: RunConfig) -> dict:
    started = time.time()
    require(cfg.artifact("ae_base"))
    corpus = _corpus(cfg)
    base = load_autoencoder(cfg.artifact("ae_base"))
    a = cfg.values["ae"]
    tr = ~corpus.pair_heldout
    target = encode_labels(corpus.s_n[corpus.pair_scene[tr]])
    aux = encode_labels(corpus.s_k[tr])
    masks = torch.from_numpy(corpus.mask_k[tr]).float()
    seeds, losses = {}, {}
    for gated, name in ((True, "ae_gated"), (False, "ae_ungated")):
        seed = cfg.stream_seed("skip_gated" if gated else "skip_ungated")
        res = train_skip_modules(base, target, aux, masks, gated=gated, steps=a["skip_steps"], batch_size=a["batch_size"],
                                 lr=a["lr"], warmup=a["warmup"], seed=seed, lambdas=(a["lambda1"], a["lambda2"]))
        save_autoencoder(cfg.artifact(name), res.model, run_config_hash=cfg.hash, seed=seed)
        seeds[name], losses[name] = seed, res.losses
    write_run_log(cfg, "train-skip", seeds, started, losses)
    return {k: v[-1] if v else None for k, v in losses.items()}


def cmd_train_maskdiff(cfg: RunConfig) -> dict:
    started = time.time()
    require(cfg.artifact("ae_base"))
    corpus = _corpus(cfg)
    ae = load_autoencoder(cfg.artifact("ae_base"))
    m = cfg.values["mask"]
    rows = stage1_pairs(corpus, "train", insertable=False)
    seed = cfg.stream_seed("mask")
    res = train_mask_model(ae, corpus.s_k[rows], corpus.s_n[corpus.pair_scene[rows]], corpus.edit_ids[rows],
                           cfg.mask_config(), steps=m["steps"], batch_size=m["batch_size"], lr=m["lr"],
                           warmup=m["warmup"], seed=seed)
    save_mask_model(cfg.artifact("mask_base"), res.model, run_config_hash=cfg.hash, seed=seed)
    write_run_log(cfg, "train-maskdiff", {"mask": seed}, started, {"mask": res.losses}, pairs=int(len(rows)))
    return {"final_loss": res.losses[-1] if res.losses else None}


def cmd_finetune_insert(cfg: RunConfig) -> dict:
    started = time.time()
    require(cfg.artifact("ae_base"), cfg.artifact("mask_base"))
    corpus = _corpus(cfg)
    ae = load_autoencoder(cfg.artifact("ae_base"))
    base = load_mask_model(cfg.artifact("mask_base"))
    m = cfg.values["mask"]
    rows = stage1_pairs(corpus, "train", insertable=True)
    seed = cfg.stream_seed("insert")
    res = finetune_insertion(base, ae, corpus.s_k[rows], corpus.s_n[corpus.pair_scene[rows]], corpus.edit_ids[rows],
                             steps=m["insert_steps"], batch_size=m["batch_size"], lr=m["insert_lr"],
                             warmup=m["warmup"], seed=seed)
    save_mask_model(cfg.artifact("mask_insert"), res.model, run_config_hash=cfg.hash, seed=seed)
    write_run_log(cfg, "finetune-insert", {"insert": seed}, started, {"insert": res.losses}, pairs=int(len(rows)))
    return {"final_loss": res.losses[-1] if res.losses else None}


def cmd_train_base(cfg: RunConfig) -> dict:
    started = time.time()
    corpus = _corpus(cfg)
    e = cfg.values["edit"]
    tr = ~corpus.heldout
    seed = cfg.stream_seed("edit_base")
    res = train_base(corpus.images[tr], corpus.caption_ids[tr], cfg.edit_config(), steps=e["base_steps"],
                     batch_size=e["batch_size"], lr=e["lr"], warmup=e["warmup"], seed=seed)
    save_edit_base(cfg.artifact("edit_base"), res.model, run_config_hash=cfg.hash, seed=seed)
    write_run_log(cfg, "train-base", {"edit_base": seed}, started, {"edit_base": res.losses})
    return {"final_loss": res.losses[-1] if res.losses else None}


def cmd_train_control(cfg: RunConfig) -> dict:
    started = time.time()
    require(cfg.artifact("edit_base"))
    corpus = _corpus(cfg)
    base = load_edit_base(cfg.artifact("edit_base"))
    e = cfg.values["edit"]
    tr = ~corpus.heldout
    seed = cfg.stream_seed("control")
    res = train_control(base, corpus.images[tr], corpus.s_n[tr], corpus.caption_ids[tr], steps=e["control_steps"],
                        batch_size=e["batch_size"], lr=e["lr"], warmup=e["warmup"], seed=seed)
    save_control(cfg.artifact("edit_control"), res.model, run_config_hash=cfg.hash, seed=seed)
    write_run_log(cfg, "train-control", {"control": seed}, started, {"control": res.losses},
                  base_digest=res.model.base_digest())
    return {"final_loss": res.losses[-1] if res.losses else None}


def load_stage_models(cfg: RunConfig, names) -> dict:
    paths = {n: cfg.artifact(n) for n in names}
    require(*paths.values())
    out = {}
    for n in names:
        if n.startswith("ae_"):
            out[n] = load_autoencoder(paths[n])
        elif n.startswith("mask_"):
            out[n] = load_mask_model(paths[n])
    if "edit_control" in names:
        out["editor"] = load_control(paths["edit_control"], load_edit_base(cfg.artifact("edit_base")))
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def cmd_eval(cfg: RunConfig) -> EvalReport:
    started = time.time()
    names = list(ARTIFACTS)
    require(*(cfg.artifact(n) for n in names))
    corpus = _corpus(cfg)
    models = load_stage_models(cfg, names)
    ev = cfg.values["eval"]
    sampler = cfg.sampler()
    ae = autoencoder_report(models["ae_base"], models["ae_gated"], models["ae_ungated"], corpus)
    s1 = stage1_report(models["mask_base"], models["mask_insert"], models["ae_gated"], corpus, sampler,
                       ev["n_edit"], ev["n_diversity"], ev["n_insert"], seed=cfg.seed)
    s2 = stage2_report(models["editor"], corpus, sampler, ev["n_stage2_loss"], ev["n_stage2_edit"], seed=cfg.seed,
                       ae=models["ae_gated"], mask_model=models["mask_base"])
    metrics = {k: v for k, v in flatten({"ae": ae, "stage1": s1, "stage2": s2}).items() if ".count" not in k and "counts." not in k}
    counts = {k: v for k, v in flatten({"ae": ae, "stage1": s1, "stage2": s2}).items() if k not in metrics}
    report = EvalReport(
        metrics=metrics,
        count=int(corpus.heldout.sum()),
        config_hash=cfg.hash,
        seed=cfg.seed,
        notes={"proxies": "class_area_w1 stands in for FID; CLIP score and identity similarity are not computed",
               "counts": counts},
    )
    atomic_write_text(cfg.run_dir / "eval" / "report.json", report.to_json())
    write_run_log(cfg, "eval", {"master": cfg.seed}, started)
    return report


@dataclass
class EditRequest:
    reference: Path
    map_path: Path
    edit_text: str
    caption: str
    mode: str = "edit"
    user_mask: np.ndarray | None = None
    seed: int = 0
    steps: int | None = None
    guidance: float | None = None

    def __post_init__(self):
        resolve_class(self.edit_text)
        tokenize(self.caption)

    @classmethod
    def from_task_file(cls, path, reference, caption) -> "EditRequest":
        """Task JSON: {"mode","map","edit_text","user_mask_rle"?,"seed","steps","guidance"}."""
        path = Path(path)
        try:
            task = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read task file {path}: {exc}") from exc
        map_path = (path.parent / task["map"]).resolve()
        mask = None
        if task.get("user_mask_rle") is not None:
            labels = read_map(map_path).labels
            mask = rle_decode(task["user_mask_rle"], *labels.shape)
        return cls(Path(reference), map_path, task["edit_text"], caption, task.get("mode", "edit"), mask,
                   int(task.get("seed", 0)), task.get("steps"), task.get("guidance"))


def cmd_edit(cfg: RunConfig, request: EditRequest, dest) -> dict:
    """Stage 1 then stage 2; writes edited_map.pgm, edited.ppm and edit.json into ``dest``."""
    started = time.time()
    dest = Path(dest)
    require(request.reference, request.map_path)
    models = load_stage_models(cfg, ["ae_gated", "mask_base", "mask_insert", "edit_base", "edit_control"])
    reference = read_image(request.reference)
    s_old = read_map(request.map_path)
    if reference.shape[:2] != s_old.labels.shape:
        raise ConfigError("reference image and map sizes differ")
    sampler = cfg.sampler(steps=request.steps, guidance_scale=request.guidance, seed=request.seed)
    task = EditTask(request.mode, s_old, request.edit_text, request.user_mask, seed=request.seed)
    mask_model = models["mask_insert"] if request.mode == "insert" else models["mask_base"]
    s_new = generate_mask(task, models["ae_gated"], mask_model, sampler)
    result = edit_image(reference, s_old, s_new, tokenize(request.caption), models["editor"], sampler,
                        target_class=task.target_class)
    dest.mkdir(parents=True, exist_ok=True)
    write_map(s_new, dest / "edited_map.pgm")
    write_image(result.image, dest / "edited.ppm")
    record = {
        "mode": request.mode,
        "edit_text": request.edit_text,
        "caption": request.caption,
        "seed": request.seed,
        "sampler": {"steps": sampler.steps, "guidance_scale": sampler.guidance_scale, "eta": sampler.eta},
        "noop": result.noop,
        "region_pixels": int(result.region.sum()),
        "user_mask": request.user_mask is not None,
        "config_hash": cfg.hash,
        "elapsed_s": round(time.time() - started, 3),
    }
    atomic_write_text(dest / "edit.json", json.dumps(record, sort_keys=True, indent=2) + "\n")
    return record


def colorize(labels: np.ndarray) -> np.ndarray:
    return DEFAULT_PALETTE.as_array().astype(np.uint8)[labels]


def cmd_sample_grid(cfg: RunConfig, n_scenes: int = 4, dest=None) -> Path:
    """Rows: held-out scenes; columns: the map, then one resize edit per editable class."""
    from .evaluation import EDITABLE_CLASSES
    from .synth_dataset import CLASS_NAMES, SIZE_WORDS

    models = load_stage_models(cfg, ["ae_gated", "mask_base"])
    corpus = _corpus(cfg)
    rows = np.nonzero(corpus.heldout)[0][:n_scenes]
    sampler = cfg.sampler()
    tasks = []
    for r in rows:
        for c in EDITABLE_CLASSES:
            if (corpus.s_n[r] == c).any():
                text = f"{SIZE_WORDS[c][-1]} {CLASS_NAMES[c]}"
                tasks.append(EditTask("edit", SemanticMap(corpus.s_n[r]), text, seed=sampler.seed))
            else:
                tasks.append(None)
    maps = generate_masks([t for t in tasks if t is not None], models["ae_gated"], models["mask_base"], sampler)
    it = iter(maps)
    h, w = corpus.s_n.shape[1:]
    cols = 1 + len(EDITABLE_CLASSES)
    grid = np.zeros((len(rows) * h, cols * w, 3), dtype=np.uint8)
    for i, r in enumerate(rows):
        grid[i * h : (i + 1) * h, :w] = colorize(corpus.s_n[r])
        for j in range(len(EDITABLE_CLASSES)):
            t = tasks[i * len(EDITABLE_CLASSES) + j]
            if t is not None:
                grid[i * h : (i + 1) * h, (j + 1) * w : (j + 2) * w] = colorize(next(it).labels)
    dest = Path(dest) if dest else cfg.run_dir / "grid"
    dest.mkdir(parents=True, exist_ok=True)
    write_image(grid, dest / "mask_grid.ppm")
    return dest / "mask_grid.ppm"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-skip": cmd_train_skip,
    "train-maskdiff": cmd_train_maskdiff,
    "finetune-insert": cmd_finetune_insert,
    "train-base": cmd_train_base,
    "train-control": cmd_train_control,
}
