"""Procedural face-like scenes, captions, renders and corpus assembly.

Everything here is a pure function of (config, seed): the same master seed
always rebuilds a byte-identical corpus.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, VocabularyError
from .semantic_maps import (
    BACKGROUND,
    CLASS_NAMES,
    EYEGLASSES,
    EYES,
    FACE,
    HAIR,
    HAT,
    MOUTH,
    NOSE,
    NUM_CLASSES,
    InstanceLayer,
    LayeredScene,
    SemanticMap,
    all_pairs,
    compose_layers,
    read_image,
    read_map,
    rle_decode,
    rle_encode,
    write_image,
    write_map,
    write_scene,
)

MAX_TOKENS = 16
PAD_ID, EMPTY_ID = 0, 1
EMPTY_TEXT = "<empty>"
MIN_CANVAS = 32

# z-order is fixed by class: face < hair < eyes < nose < mouth < eyeglasses < hat
Z_ORDER = {FACE: 0, HAIR: 1, EYES: 2, NOSE: 3, MOUTH: 4, EYEGLASSES: 5, HAT: 6}

SIZE_WORDS = {
    FACE: ("slim", "oval", "broad"),
    HAIR: ("short", "medium", "long"),
    EYES: ("small", "medium", "large"),
    NOSE: ("small", "medium", "large"),
    MOUTH: ("small", "medium", "wide"),
    EYEGLASSES: ("small", "medium", "large"),
    HAT: ("low", "medium", "tall"),
}
CLASS_KEYWORDS = {CLASS_NAMES[c]: c for c in Z_ORDER}
OPENERS = ("a", "one", "this")
GLASSES_SHAPES = ("round", "square")

# Amodal-area tercile cut points (pixels, 64x64 canvas) from a 10,000-scene
# calibration run of ``calibrate_area_terciles(SceneConfig(), 10_000, seed=0)``.
AREA_TERCILES = {
    FACE: (872.0, 975.0),
    HAIR: (442.0, 634.0),
    EYES: (52.0, 67.0),
    NOSE: (29.0, 38.0),
    MOUTH: (40.0, 55.0),
    EYEGLASSES: (208.0, 298.0),
    HAT: (516.0, 612.0),
}

# Renderer base colors; pairwise distance > 2 * 24 * sqrt(3) keeps every
# perturbed pixel nearest to its own base color.
RENDER_COLORS = np.array(
    [
        (16, 16, 16),
        (230, 180, 140),
        (110, 60, 20),
        (40, 60, 200),
        (190, 100, 70),
        (180, 20, 120),
        (60, 200, 200),
        (230, 230, 40),
    ],
    dtype=np.float64,
)
TEXTURE_AMPLITUDE = 16.0
SHADING_AMPLITUDE = 8.0


@dataclass(frozen=True)
class SceneConfig:
    """Canvas size, attribute presence probabilities and shape ranges.

    Lengths are fractions of the canvas (or of the face axes where noted).
    """

    width: int = 64
    height: int = 64
    presence: dict = field(
        default_factory=lambda: {HAIR: 0.9, EYES: 1.0, NOSE: 1.0, MOUTH: 1.0, EYEGLASSES: 0.4, HAT: 0.3}
    )
    face_jitter: float = 0.04
    face_ax: tuple = (0.20, 0.28)
    face_ay: tuple = (0.26, 0.34)
    hair_length: tuple = (-0.3, 1.3)  # of face ay, below the face centre
    hair_thickness: tuple = (0.04, 0.12)
    hair_fringe: tuple = (0.15, 0.45)  # of face ay, below the face top
    eye_dx: tuple = (0.35, 0.5)  # of face ax
    eye_rise: tuple = (0.10, 0.25)  # of face ay
    eye_ax: tuple = (0.045, 0.08)
    eye_ay: tuple = (0.025, 0.05)
    nose_drop: tuple = (0.05, 0.2)
    nose_ax: tuple = (0.03, 0.06)
    nose_ay: tuple = (0.04, 0.08)
    mouth_drop: tuple = (0.45, 0.65)
    mouth_ax: tuple = (0.25, 0.5)  # of face ax
    mouth_ay: tuple = (0.025, 0.06)
    lens_scale: tuple = (1.2, 1.8)  # of eye ax
    square_lens_prob: float = 0.5
    hat_band: tuple = (0.15, 0.45)  # of face ay, brim below the face top
    hat_height: tuple = (0.35, 0.7)  # of face ay
    hat_margin: tuple = (0.05, 0.12)
    seed: int = 0

    def __post_init__(self):
        if self.width < MIN_CANVAS or self.height < MIN_CANVAS:
            raise ConfigError(f"canvas {self.width}x{self.height} below minimum {MIN_CANVAS}")
        if FACE in self.presence and self.presence[FACE] != 1.0:
            raise ConfigError("the face is always present")
        for cls, p in self.presence.items():
            if int(cls) not in Z_ORDER:
                raise ConfigError(f"unknown class {cls} in presence table")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"presence probability {p} for class {cls} outside [0, 1]")
        for name, value in asdict(self).items():
            if isinstance(value, tuple) and (len(value) != 2 or value[0] > value[1]):
                raise ConfigError(f"range {name}={value} is empty")
        object.__setattr__(self, "presence", {int(k): float(v) for k, v in self.presence.items()})

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["presence"] = {str(k): v for k, v in sorted(self.presence.items())}
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "SceneConfig":
        payload = dict(payload)
        if "presence" in payload:
            payload["presence"] = {int(k): float(v) for k, v in payload["presence"].items()}
        for key, value in payload.items():
            if isinstance(value, list):
                payload[key] = tuple(value)
        return cls(**payload)


def derive_seed(master: int, index: int) -> int:
    """64-bit per-item seed from (master, index)."""
    return int(np.random.SeedSequence([int(master) & (2**64 - 1), int(index)]).generate_state(1, np.uint64)[0])


def _ellipse(yy, xx, cy, cx, ay, ax):
    mask = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    if not mask.any():
        mask[int(np.clip(round(cy), 0, yy.shape[0] - 1)), int(np.clip(round(cx), 0, xx.shape[1] - 1))] = True
    return mask


def sample_scene(config: SceneConfig, seed: int) -> LayeredScene:
    rng = np.random.default_rng(seed)
    W, H = config.width, config.height
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5

    def u(bounds, scale=1.0):
        return rng.uniform(*bounds) * scale

    # Geometry is always drawn in the same order so presence flags do not
    # shift the random stream of later attributes.
    j = config.face_jitter
    cx = W * (0.5 + rng.uniform(-j, j))
    cy = H * (0.55 + rng.uniform(-j, j))
    ax, ay = u(config.face_ax, W), u(config.face_ay, H)
    hair_len, hair_t, fringe = u(config.hair_length, ay), u(config.hair_thickness, W), u(config.hair_fringe, ay)
    eye_dx, eye_rise = u(config.eye_dx, ax), u(config.eye_rise, ay)
    eye_ax, eye_ay = u(config.eye_ax, W), u(config.eye_ay, H)
    nose_drop, nose_ax, nose_ay = u(config.nose_drop, ay), u(config.nose_ax, W), u(config.nose_ay, H)
    mouth_drop, mouth_ax, mouth_ay = u(config.mouth_drop, ay), u(config.mouth_ax, ax), u(config.mouth_ay, H)
    lens_r = u(config.lens_scale, eye_ax)
    square = rng.uniform() < config.square_lens_prob
    hat_band, hat_h, hat_m = u(config.hat_band, ay), u(config.hat_height, ay), u(config.hat_margin, W)
    draws = {cls: rng.uniform() for cls in sorted(Z_ORDER)}

    face = _ellipse(yy, xx, cy, cx, ay, ax)
    masks = {FACE: face}

    outer = _ellipse(yy, xx, cy, cx, ay + hair_t, ax + hair_t) | ((np.abs(xx - cx) <= ax + hair_t) & (yy >= cy))
    hairline = cy - ay + fringe
    masks[HAIR] = outer & (yy <= cy + hair_len) & ~(face & (yy > hairline))

    eye_y = cy - eye_rise
    masks[EYES] = _ellipse(yy, xx, eye_y, cx - eye_dx, eye_ay, eye_ax) | _ellipse(yy, xx, eye_y, cx + eye_dx, eye_ay, eye_ax)
    masks[NOSE] = _ellipse(yy, xx, cy + nose_drop, cx, nose_ay, nose_ax)
    masks[MOUTH] = _ellipse(yy, xx, cy + mouth_drop, cx, mouth_ay, mouth_ax)

    lenses = np.zeros_like(face)
    for ex in (cx - eye_dx, cx + eye_dx):
        if square:
            lenses |= (np.abs(xx - ex) <= lens_r) & (np.abs(yy - eye_y) <= lens_r)
        else:
            lenses |= _ellipse(yy, xx, eye_y, ex, lens_r, lens_r)
    bridge = (np.abs(yy - eye_y) <= max(0.75, 0.2 * lens_r)) & (np.abs(xx - cx) <= eye_dx)
    masks[EYEGLASSES] = lenses | bridge

    brim_y = cy - ay + hat_band
    crown = (yy <= brim_y) & (((xx - cx) / (ax + hat_m)) ** 2 + ((yy - brim_y) / (hat_band + hat_h)) ** 2 <= 1.0)
    brim = (np.abs(yy - brim_y) <= 1.0) & (np.abs(xx - cx) <= ax + 1.5 * hat_m)
    masks[HAT] = crown | brim

    layers = []
    for cls, z in sorted(Z_ORDER.items(), key=lambda kv: kv[1]):
        present = cls == FACE or draws[cls] < config.presence.get(cls, 0.0)
        if present and masks[cls].any():
            layers.append(InstanceLayer(cls, z, masks[cls]))
    return LayeredScene(W, H, tuple(layers))


@dataclass(frozen=True)
class CaptionRecord:
    caption: str
    edits: tuple  # ((class_id, edit_text), ...) in z-order


class Vocabulary:
    """Closed word list; id 0 is padding and id 1 the empty (unconditional) text."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(tokens) > 256:
            raise VocabularyError("vocabulary limited to 256 entries")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens")
        for tok in tokens:
            if tok != tok.lower() or any(ch.isspace() for ch in tok) or not tok:
                raise VocabularyError(f"bad token {tok!r}")
        if tokens[:2] != ["<pad>", EMPTY_TEXT]:
            raise VocabularyError("ids 0/1 are reserved for <pad> and <empty>")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index


def _default_tokens():
    words = ["<pad>", EMPTY_TEXT, *OPENERS, "with", *CLASS_KEYWORDS, *GLASSES_SHAPES]
    for adjs in SIZE_WORDS.values():
        words.extend(a for a in adjs if a not in words)
    return words


VOCAB = Vocabulary(_default_tokens())


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> np.ndarray:
    words = text.split()
    ids = np.full(MAX_TOKENS, PAD_ID, dtype=np.int64)
    for i, word in enumerate(words[:MAX_TOKENS]):
        if word not in vocab:
            raise VocabularyError(f"word {word!r} is not in the vocabulary")
        ids[i] = vocab.index[word]
    return ids


def detokenize(ids, vocab: Vocabulary = VOCAB) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids if int(i) != PAD_ID)


def resolve_class(text: str) -> int:
    """The single class keyword named by an edit text."""
    found = {CLASS_KEYWORDS[w] for w in text.split() if w in CLASS_KEYWORDS}
    if not found:
        raise VocabularyError(f"edit text {text!r} names no known attribute")
    if len(found) > 1:
        names = sorted(CLASS_NAMES[c] for c in found)
        raise VocabularyError(f"edit text {text!r} is ambiguous between {names}")
    return found.pop()


def size_word(class_id: int, area: float) -> str:
    lo, hi = AREA_TERCILES[class_id]
    idx = 0 if area < lo else (1 if area < hi else 2)
    return SIZE_WORDS[class_id][idx]


def glasses_shape(mask: np.ndarray) -> str:
    # square lenses fill the corner of the bounding box, round ones never do
    rows, cols = np.nonzero(mask)
    return "square" if mask[rows.min(), cols.min()] else "round"


def edit_text_for(layer: InstanceLayer, scale: float = 1.0) -> str:
    area = layer.amodal_mask.sum() * scale
    noun = CLASS_NAMES[layer.class_id]
    adj = size_word(layer.class_id, area)
    if layer.class_id == EYEGLASSES:
        return f"{adj} {glasses_shape(layer.amodal_mask)} {noun}"
    return f"{adj} {noun}"


def caption_scene(scene: LayeredScene, seed: int) -> CaptionRecord:
    rng = np.random.default_rng(seed)
    # tercile thresholds are in 64x64 pixels
    scale = (64 * 64) / (scene.width * scene.height)
    edits = tuple((layer.class_id, edit_text_for(layer, scale)) for layer in scene.layers)
    opener = OPENERS[rng.integers(len(OPENERS))]
    by_class = dict(edits)
    parts = [opener, by_class.get(FACE, "face"), "with"]
    for cls, text in edits:
        if cls == FACE:
            continue
        words = text.split()
        # eyeglasses drop the size word so full captions stay within 16 tokens
        parts.append(" ".join(words[1:]) if cls == EYEGLASSES else text)
    return CaptionRecord(caption=" ".join(parts), edits=edits)


def calibrate_area_terciles(config: SceneConfig, n: int = 10_000, seed: int = 0) -> dict:
    areas: dict[int, list[int]] = {c: [] for c in Z_ORDER}
    for i in range(n):
        # presence forced to 1 so every class is measured on every draw
        scene = sample_scene(_all_present(config), derive_seed(seed, i))
        for layer in scene.layers:
            areas[layer.class_id].append(int(layer.amodal_mask.sum()))
    return {c: tuple(float(v) for v in np.quantile(a, [1 / 3, 2 / 3], method="nearest")) for c, a in areas.items()}


def _all_present(config: SceneConfig) -> SceneConfig:
    payload = config.to_dict()
    payload["presence"] = {str(c): 1.0 for c in Z_ORDER if c != FACE}
    return SceneConfig.from_dict(payload)


def _value_noise(rng: np.random.Generator, height: int, width: int, cells: int = 6) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, height)
    xs = np.linspace(0, cells, width)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def render_labels(labels: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    height, width = labels.shape
    texture = TEXTURE_AMPLITUDE * _value_noise(rng, height, width)
    ramp = (np.arange(height)[:, None] + np.arange(width)[None, :]) / max(height + width - 2, 1)
    shading = SHADING_AMPLITUDE * (1.0 - 2.0 * ramp)  # light from the top-left
    image = RENDER_COLORS[labels] + (texture + shading)[..., None]
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def render_scene(scene: LayeredScene, seed: int) -> np.ndarray:
    """Deterministic H x W x 3 uint8 "photo" of the composed scene."""
    return render_labels(compose_layers(scene).labels, seed)


def nearest_render_class(image: np.ndarray) -> np.ndarray:
    """Per-pixel class of the nearest renderer base color."""
    d2 = ((image.astype(np.float64)[..., None, :] - RENDER_COLORS) ** 2).sum(-1)
    return d2.argmin(-1).astype(np.uint8)


def heldout_count(n_scenes: int, fraction: float = 0.1) -> int:
    if n_scenes < 2:
        return 0
    return max(1, int(round(n_scenes * fraction)))


def is_heldout(scene_index: int, n_scenes: int, fraction: float = 0.1) -> bool:
    """The last ``fraction`` of scene indices form the held-out split."""
    return scene_index >= n_scenes - heldout_count(n_scenes, fraction)


def build_dataset(n_scenes: int, config: SceneConfig, out_dir, seed: int | None = None) -> list[dict]:
    """Write scenes, maps, renders and a JSONL manifest under ``out_dir``.

    The directory is assembled in a sibling temp dir and swapped in at the
    end, so a failure never leaves partial output behind.
    """
    master = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        records = _build_into(work, n_scenes, config, master)
        meta = {"n_scenes": n_scenes, "seed": master, "config": config.to_dict()}
        (work / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
        if out_dir.exists():
            trash = out_dir.with_name(f".{out_dir.name}.old{os.getpid()}")
            os.replace(out_dir, trash)
            os.replace(work, out_dir)
            shutil.rmtree(trash)
        else:
            os.replace(work, out_dir)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    return records


def _build_into(root: Path, n_scenes: int, config: SceneConfig, master: int) -> list[dict]:
    for sub in ("scenes", "maps", "images"):
        (root / sub).mkdir()
    records = []
    for i in range(n_scenes):
        scene_seed = derive_seed(master, i)
        scene = sample_scene(config, scene_seed)
        caption = caption_scene(scene, scene_seed)
        sid = f"s{i:05d}"
        scene_path, sn_path, image_path = f"scenes/{sid}.json", f"maps/{sid}_n.pgm", f"images/{sid}.ppm"
        write_scene(scene, root / scene_path)
        s_n = compose_layers(scene)
        write_map(s_n, root / sn_path)
        write_image(render_labels(s_n.labels, scene_seed), root / image_path)
        common = {"scene": scene_path, "map_Sn": sn_path, "caption": caption.caption, "image": image_path, "seed": scene_seed}
        records.append({"id": sid, "kind": "full", "map_Sk": None, "mask_Mk_rle": None, "class_id": None, "edit_text": None, **common})
        if scene.n < 2:
            continue
        edits = dict(caption.edits)
        for pair in all_pairs(scene):
            sk_path = f"maps/{sid}_k{pair.k}.pgm"
            write_map(pair.s_k, root / sk_path)
            records.append(
                {
                    "id": f"{sid}_k{pair.k}",
                    "kind": "pair",
                    "map_Sk": sk_path,
                    "mask_Mk_rle": rle_encode(pair.mask_k),
                    "class_id": pair.class_id,
                    "edit_text": edits[pair.class_id],
                    **common,
                }
            )
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return records


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Corpus:
    """Array view of a built corpus, split into train / held-out by scene index."""

    root: Path
    scene_ids: list
    s_n: np.ndarray  # (N, H, W) uint8
    images: np.ndarray  # (N, H, W, 3) uint8
    captions: list
    caption_ids: np.ndarray  # (N, 16)
    heldout: np.ndarray  # (N,) bool
    pair_scene: np.ndarray  # (P,) scene row
    pair_ids: list
    s_k: np.ndarray  # (P, H, W)
    mask_k: np.ndarray  # (P, H, W) bool
    pair_class: np.ndarray  # (P,)
    edit_texts: list
    edit_ids: np.ndarray  # (P, 16)

    @property
    def pair_heldout(self) -> np.ndarray:
        return self.heldout[self.pair_scene]

    def median_class_area(self, class_id: int) -> float:
        areas = (self.s_n == class_id).sum(axis=(1, 2))
        areas = areas[~self.heldout & (areas > 0)]
        return float(np.median(areas)) if areas.size else 0.0


def load_corpus(root, holdout_fraction: float = 0.1) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        from .errors import MissingArtifactError

        raise MissingArtifactError(f"no corpus manifest at {manifest}")
    records = read_manifest(manifest)
    fulls = [r for r in records if r["kind"] == "full"]
    row = {r["id"]: i for i, r in enumerate(fulls)}
    s_n = np.stack([read_map(root / r["map_Sn"]).labels for r in fulls]) if fulls else np.zeros((0, 64, 64), np.uint8)
    height, width = s_n.shape[1:]
    images = np.stack([read_image(root / r["image"]) for r in fulls]) if fulls else np.zeros((0, height, width, 3), np.uint8)
    pairs = [r for r in records if r["kind"] == "pair"]
    n = len(fulls)
    return Corpus(
        root=root,
        scene_ids=[r["id"] for r in fulls],
        s_n=s_n,
        images=images,
        captions=[r["caption"] for r in fulls],
        caption_ids=np.stack([tokenize(r["caption"]) for r in fulls]) if fulls else np.zeros((0, MAX_TOKENS), np.int64),
        heldout=np.array([is_heldout(i, n, holdout_fraction) for i in range(n)], dtype=bool),
        pair_scene=np.array([row[r["id"].split("_")[0]] for r in pairs], dtype=np.int64),
        pair_ids=[r["id"] for r in pairs],
        s_k=np.stack([read_map(root / r["map_Sk"]).labels for r in pairs]) if pairs else np.zeros((0, height, width), np.uint8),
        mask_k=np.stack([rle_decode(r["mask_Mk_rle"], height, width) for r in pairs]) if pairs else np.zeros((0, height, width), bool),
        pair_class=np.array([r["class_id"] for r in pairs], dtype=np.int64),
        edit_texts=[r["edit_text"] for r in pairs],
        edit_ids=np.stack([tokenize(r["edit_text"]) for r in pairs]) if pairs else np.zeros((0, MAX_TOKENS), np.int64),
    )


__all__ = [
    "AREA_TERCILES",
    "BACKGROUND",
    "CaptionRecord",
    "Corpus",
    "NUM_CLASSES",
    "RENDER_COLORS",
    "SceneConfig",
    "VOCAB",
    "Vocabulary",
    "build_dataset",
    "calibrate_area_terciles",
    "caption_scene",
    "derive_seed",
    "detokenize",
    "load_corpus",
    "nearest_render_class",
    "render_scene",
    "resolve_class",
    "sample_scene",
    "tokenize",
]
