"""Deterministic synthetic detection scenes and rendered feature pyramids.

Scenes carry axis-aligned boxes with class labels; features are rendered
analytically so a detector is learnable end to end without an image
backbone. Every object writes an anisotropic Gaussian blob, centered on
its box and scaled to it, into the subset of channels keyed by its
class (channels c, c+K, c+2K, ...). Independent per-scene RNG streams
make generation a pure function of (spec, index), and rendering a pure
function of the scene, so datasets can be stored as scenes only and
features re-rendered on load.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .decoder import FeaturePyramid

__all__ = [
    "Dataset",
    "DatasetFormatError",
    "DatasetSpec",
    "Scene",
    "generate_scene",
    "load_dataset",
    "make_dataset",
    "render_features",
    "save_dataset",
]

_MAGIC = b"EQDS"
_VERSION = 1
_MIN_SIDE = 4.0


class DatasetFormatError(ValueError):
    """Raised for unreadable dataset files (magic, version, truncation)."""


@dataclass(frozen=True)
class DatasetSpec:
    """Generation and rendering parameters; fully determines a dataset."""

    num_scenes: int
    image_size: tuple[int, int] = (128, 128)
    max_objects: int = 3
    num_classes: int = 4
    noise_std: float = 0.05
    master_seed: int = 0
    feature_dim: int = 64
    levels: int = 2
    base_stride: int = 8

    def __post_init__(self):
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be positive")
        if self.max_objects < 0:
            raise ValueError("max_objects must be >= 0")
        for name in ("num_classes", "feature_dim", "levels", "base_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        h, w = self.image_size
        if min(h, w) < 2 * _MIN_SIDE:
            raise ValueError("image too small for the minimum box side")


@dataclass
class Scene:
    """One synthetic image: labeled boxes plus the seed of its RNG stream."""

    image_size: tuple[int, int]
    boxes: np.ndarray  # (M, 4) corners x1, y1, x2, y2
    classes: np.ndarray  # (M,) int
    seed: int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes disagree on object count")

    @property
    def num_objects(self) -> int:
        return len(self.classes)

    def equals(self, other: "Scene") -> bool:
        return (
            self.image_size == other.image_size
            and self.seed == other.seed
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.classes, other.classes)
        )


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Scene for one index: its own RNG stream, uniform object count,
    boxes drawn as corner pairs with rejection below the minimum side."""
    if not 0 <= index < spec.num_scenes:
        raise ValueError(f"index {index} outside 0..{spec.num_scenes - 1}")
    ss = np.random.SeedSequence([spec.master_seed, index])
    seed = int(ss.generate_state(1, dtype=np.uint64)[0])
    rng = np.random.default_rng(ss)
    h, w = spec.image_size
    count = int(rng.integers(0, spec.max_objects + 1))
    classes = rng.integers(0, spec.num_classes, size=count)
    boxes = []
    while len(boxes) < count:
        xs = np.sort(rng.uniform(0.0, w, size=2))
        ys = np.sort(rng.uniform(0.0, h, size=2))
        if xs[1] - xs[0] >= _MIN_SIDE and ys[1] - ys[0] >= _MIN_SIDE:
            boxes.append([xs[0], ys[0], xs[1], ys[1]])
    return Scene(
        spec.image_size,
        np.array(boxes).reshape(-1, 4),
        classes,
        seed,
    )


def _grid_shape(image_size, stride: int) -> tuple[int, int]:
    h, w = image_size
    return -(-h // stride), -(-w // stride)


def render_features(scene: Scene, spec: DatasetSpec) -> FeaturePyramid:
    """Analytic pyramid for a scene.

    Each object adds exp(-(dx^2/(2 sx^2) + dy^2/(2 sy^2))) to its class
    channels, with sx = box_w/4, sy = box_h/4, evaluated at cell centers
    (cell + 0.5) * stride. Clutter is Gaussian with std noise_std, drawn
    from a stream derived from the scene seed, so re-rendering is exact.
    """
    d, k = spec.feature_dim, spec.num_classes
    clutter = np.random.default_rng(np.random.SeedSequence([scene.seed, 1]))
    levels = []
    for lvl in range(spec.levels):
        stride = spec.base_stride * (1 << lvl)
        gh, gw = _grid_shape(scene.image_size, stride)
        fmap = np.zeros((gh, gw, d))
        cy = (np.arange(gh) + 0.5) * stride
        cx = (np.arange(gw) + 0.5) * stride
        for box, cls in zip(scene.boxes, scene.classes):
            bw, bh = box[2] - box[0], box[3] - box[1]
            mx, my = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
            gx = ((cx - mx) / (bw / 4.0)) ** 2
            gy = ((cy - my) / (bh / 4.0)) ** 2
            blob = np.exp(-0.5 * (gy[:, None] + gx[None, :]))
            fmap[:, :, int(cls)::k] += blob[:, :, None]
        if spec.noise_std > 0:
            fmap += spec.noise_std * clutter.standard_normal(fmap.shape)
        levels.append(fmap)
    return FeaturePyramid(levels, scene.image_size)


@dataclass
class Dataset:
    """Spec plus materialized scenes; features render on demand."""

    spec: DatasetSpec
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)

    def features(self, index: int) -> FeaturePyramid:
        return render_features(self.scenes[index], self.spec)


def make_dataset(spec: DatasetSpec) -> Dataset:
    return Dataset(spec, [generate_scene(spec, i) for i in range(spec.num_scenes)])


_SPEC_FMT = "<qqqqqdqqqq"  # counts, noise_std, feature block, master seed


def _pack_spec(spec: DatasetSpec) -> bytes:
    return struct.pack(
        _SPEC_FMT,
        spec.num_scenes, spec.image_size[0], spec.image_size[1],
        spec.max_objects, spec.num_classes, spec.noise_std,
        spec.feature_dim, spec.levels, spec.base_stride, spec.master_seed,
    )


def _unpack_spec(raw: bytes) -> DatasetSpec:
    ns, h, w, mo, k, noise, d, lv, bs, seed = struct.unpack(_SPEC_FMT, raw)
    return DatasetSpec(
        num_scenes=ns, image_size=(h, w), max_objects=mo, num_classes=k,
        noise_std=noise, master_seed=seed, feature_dim=d, levels=lv,
        base_stride=bs,
    )


def save_dataset(spec: DatasetSpec, path) -> Dataset:
    """Generate every scene and write the dataset file; returns it too."""
    ds = make_dataset(spec)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(_pack_spec(spec))
        for scene in ds.scenes:
            fh.write(struct.pack("<Qq", scene.seed, scene.num_objects))
            for box, cls in zip(scene.boxes, scene.classes):
                fh.write(struct.pack("<ddddq", *box, cls))
    return ds


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return raw


def load_dataset(path) -> Dataset:
    """Read scenes back bit-identically; features re-render lazily."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise DatasetFormatError("not a dataset file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        spec = _unpack_spec(_read_exact(fh, struct.calcsize(_SPEC_FMT), "spec"))
        scenes = []
        for i in range(spec.num_scenes):
            seed, count = struct.unpack("<Qq", _read_exact(fh, 16, f"scene {i}"))
            if not 0 <= count <= spec.max_objects:
                raise DatasetFormatError(f"scene {i}: object count {count} out of range")
            boxes = np.empty((count, 4))
            classes = np.empty(count, dtype=np.int64)
            for j in range(count):
                rec = struct.unpack("<ddddq", _read_exact(fh, 40, f"scene {i} object {j}"))
                boxes[j] = rec[:4]
                classes[j] = rec[4]
            scenes.append(Scene(spec.image_size, boxes, classes, seed))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after the last scene")
    return Dataset(spec, scenes)
