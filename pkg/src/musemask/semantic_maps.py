"""Layered semantic scenes, label maps and their on-disk formats.

A scene is a stack of amodal instance layers. Flattening the stack by z-order
gives the label map; removing one layer before flattening gives the
"intermediate" map used as the conditioning side of a training pair.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DecodeError, DegenerateSceneError, FormatError, InvalidSceneError

NUM_CLASSES = 8

CLASS_NAMES = ("background", "face", "hair", "eyes", "nose", "mouth", "eyeglasses", "hat")
BACKGROUND, FACE, HAIR, EYES, NOSE, MOUTH, EYEGLASSES, HAT = range(NUM_CLASSES)

DEFAULT_COLORS = (
    (0, 0, 0),
    (255, 204, 153),
    (102, 51, 0),
    (0, 0, 255),
    (0, 255, 0),
    (255, 0, 0),
    (255, 255, 0),
    (255, 0, 255),
)

MIN_PALETTE_DISTANCE = 100.0


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class InstanceLayer:
    class_id: int
    z_order: int
    amodal_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.amodal_mask).astype(bool)
        if mask.ndim != 2:
            raise InvalidSceneError("amodal mask must be a 2-D grid")
        if not 1 <= self.class_id < NUM_CLASSES:
            raise InvalidSceneError(f"class_id {self.class_id} outside [1, {NUM_CLASSES - 1}]")
        if self.z_order < 0:
            raise InvalidSceneError("z_order must be non-negative")
        if not mask.any():
            raise InvalidSceneError(f"layer z={self.z_order} has an empty mask")
        object.__setattr__(self, "amodal_mask", _readonly(mask))

    def __eq__(self, other):
        if not isinstance(other, InstanceLayer):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.z_order == other.z_order
            and np.array_equal(self.amodal_mask, other.amodal_mask)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LayeredScene:
    """Amodal layers over a ``height x width`` canvas.

    Layers are stored sorted by ``z_order`` whatever order they were passed in.
    """

    width: int
    height: int
    layers: tuple[InstanceLayer, ...]

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda layer: layer.z_order))
        if not layers:
            raise InvalidSceneError("a scene needs at least one layer")
        zs = [layer.z_order for layer in layers]
        if len(set(zs)) != len(zs):
            raise InvalidSceneError(f"duplicate z_order values in {zs}")
        for layer in layers:
            if layer.amodal_mask.shape != (self.height, self.width):
                raise InvalidSceneError(
                    f"layer z={layer.z_order} has shape {layer.amodal_mask.shape}, "
                    f"canvas is {(self.height, self.width)}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def n(self) -> int:
        return len(self.layers)

    def without(self, index: int) -> list[InstanceLayer]:
        return [layer for i, layer in enumerate(self.layers) if i != index]

    def class_ids(self) -> list[int]:
        return [layer.class_id for layer in self.layers]

    def __eq__(self, other):
        if not isinstance(other, LayeredScene):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and self.layers == other.layers

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SemanticMap:
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InvalidSceneError("labels must be a 2-D grid")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidSceneError(f"labels must lie in [0, {self.num_classes - 1}]")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class Palette:
    colors: tuple[tuple[int, int, int], ...] = DEFAULT_COLORS

    def __post_init__(self):
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise ValueError(f"bad palette color {c}")
        for a, b in combinations(colors, 2):
            if np.linalg.norm(np.subtract(a, b)) < MIN_PALETTE_DISTANCE:
                raise ValueError(f"palette colors {a} and {b} are closer than {MIN_PALETTE_DISTANCE}")
        object.__setattr__(self, "colors", colors)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64)


DEFAULT_PALETTE = Palette()


@dataclass(frozen=True, eq=False)
class PairSample:
    """One leave-one-out training tuple; ``k`` is the 1-based removed layer."""

    s_k: SemanticMap
    s_n: SemanticMap
    mask_k: np.ndarray
    class_id: int
    k: int = field(default=0)


def _compose(layers: Sequence[InstanceLayer], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint8)
    for layer in sorted(layers, key=lambda layer: layer.z_order):
        if layer.amodal_mask.shape != shape:
            raise InvalidSceneError(f"layer shape {layer.amodal_mask.shape} does not match canvas {shape}")
        out[layer.amodal_mask] = layer.class_id
    return out


def compose_layers(scene: LayeredScene) -> SemanticMap:
    """Flatten the scene: each pixel takes the class of its top-most covering layer."""
    return SemanticMap(_compose(scene.layers, (scene.height, scene.width)))


def leave_one_out(scene: LayeredScene, k: int) -> PairSample:
    if scene.n < 2:
        raise DegenerateSceneError("a single-layer scene has no leave-one-out pair")
    if not 1 <= k <= scene.n:
        raise IndexError(f"k={k} outside [1, {scene.n}]")
    shape = (scene.height, scene.width)
    removed = scene.layers[k - 1]
    return PairSample(
        s_k=SemanticMap(_compose(scene.without(k - 1), shape)),
        s_n=compose_layers(scene),
        mask_k=removed.amodal_mask,
        class_id=removed.class_id,
        k=k,
    )


def all_pairs(scene: LayeredScene) -> list[PairSample]:
    if scene.n < 2:
        raise DegenerateSceneError("a single-layer scene has no leave-one-out pair")
    return [leave_one_out(scene, k) for k in range(1, scene.n + 1)]


def one_hot_encode(smap: SemanticMap) -> np.ndarray:
    """C x H x W float32 indicator stack."""
    eye = np.eye(smap.num_classes, dtype=np.float32)
    return np.ascontiguousarray(eye[smap.labels].transpose(2, 0, 1))


def palette_encode(smap: SemanticMap, palette: Palette = DEFAULT_PALETTE) -> np.ndarray:
    colors = palette.as_array().astype(np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(colors[smap.labels].transpose(2, 0, 1))


def palette_decode(array: np.ndarray, palette: Palette = DEFAULT_PALETTE, num_classes: int | None = None) -> SemanticMap:
    """Nearest palette color per pixel; ties go to the lower class index.

    Accepts ``3 x H x W`` or a batch ``B x 3 x H x W`` (returns a list then).
    """
    array = np.asarray(array, dtype=np.float64)
    if not np.isfinite(array).all():
        raise DecodeError("cannot decode non-finite values")
    if array.ndim == 4:
        return [palette_decode(a, palette, num_classes) for a in array]
    if array.ndim != 3 or array.shape[0] != 3:
        raise DecodeError(f"expected 3 x H x W, got {array.shape}")
    rgb = (array + 1.0) * 127.5
    colors = palette.as_array()
    d2 = ((rgb[None] - colors[:, :, None, None]) ** 2).sum(axis=1)
    # argmin returns the first minimum -> lowest class index on ties
    labels = d2.argmin(axis=0)
    return SemanticMap(labels, num_classes or len(colors))


def mask_support(smap: SemanticMap, class_id: int) -> np.ndarray:
    if not 0 <= class_id < smap.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {smap.num_classes - 1}]")
    return smap.labels == class_id


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating zeros/ones, starting with a zero run."""
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs) or sum(runs) != height * width:
        raise FormatError(f"run lengths sum to {sum(runs)}, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte ends the header
    if tokens[0] != magic:
        raise FormatError(f"{path}: bad magic {tokens[0]!r}, expected {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad size {width}x{height}")
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def write_map(smap: SemanticMap, path: str | os.PathLike) -> None:
    header = f"P5\n{smap.width} {smap.height}\n255\n".encode("ascii")
    _atomic_write(Path(path), header + smap.labels.tobytes())


def read_map(path: str | os.PathLike, num_classes: int = NUM_CLASSES) -> SemanticMap:
    labels = _read_netpbm(Path(path), b"P5", 1)
    if labels.max(initial=0) >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} exceeds class count {num_classes}")
    return SemanticMap(labels, num_classes)


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError("PPM images must be H x W x 3 uint8")
    height, width = image.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    _atomic_write(Path(path), header + np.ascontiguousarray(image).tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6", 3)


def scene_to_dict(scene: LayeredScene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "layers": [
            {"class_id": layer.class_id, "z": layer.z_order, "rle": rle_encode(layer.amodal_mask)}
            for layer in scene.layers
        ],
    }


def scene_from_dict(payload: dict) -> LayeredScene:
    try:
        width, height = int(payload["width"]), int(payload["height"])
        layers = [
            InstanceLayer(int(entry["class_id"]), int(entry["z"]), rle_decode(entry["rle"], height, width))
            for entry in payload["layers"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scene record: {exc}") from exc
    return LayeredScene(width, height, tuple(layers))


def write_scene(scene: LayeredScene, path: str | os.PathLike) -> None:
    text = json.dumps(scene_to_dict(scene), separators=(",", ":"))
    _atomic_write(Path(path), text.encode("utf-8"))


def read_scene(path: str | os.PathLike) -> LayeredScene:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return scene_from_dict(payload)
