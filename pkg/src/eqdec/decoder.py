"""Query-refinement decoder with a weight-tied equilibrium layer.

A query set pairs N content vectors with N positional vectors (box
center, log2 scale, log2 aspect). One initialization layer turns the
learnable queries into a content-aware starting point; a single
refinement layer, reused at every step, is then iterated toward a fixed
point. Both layers share one structure: self-attention over queries,
in-box multi-scale feature sampling, a mixing FFN, and a box-delta
head. A shared head decodes any intermediate query set into class
logits and corner boxes.

Positions are treated as data inside a refinement application: the
incoming positional vector is detached, sampling centers and delta
scales are computed from its values, and only the delta produced by the
content path carries gradient into the outgoing position. The
initialization layer keeps its incoming position attached so the
learnable initial queries can train through its delta.

Perturbation helpers (noise_content, noise_pos, rap_step) implement the
noisy solving path used during training; they are plain numpy and never
record on a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .geometry import decode_pos_t, encode_arr
from .tensor import Tensor

__all__ = [
    "ArchConfig",
    "FeaturePyramid",
    "ParamRegistry",
    "QuerySet",
    "broadcast_queries",
    "build_params",
    "init_layer",
    "noise_content",
    "noise_pos",
    "pack_queries",
    "position_embedding",
    "predict_head",
    "rap_step",
    "refinement_layer",
    "unpack_queries_t",
]


@dataclass(frozen=True)
class ArchConfig:
    """Static decoder dimensions.

    dim must be divisible by 2*heads (attention splits) and by 8 (the
    positional embedding allots dim/4 features to each of x, y, z, r).
    """

    dim: int = 64
    num_queries: int = 20
    num_classes: int = 4
    points_refine: int = 8
    points_init: int = 16
    levels: int = 2
    heads: int = 2
    mix_hidden: int = 16

    def __post_init__(self):
        if self.dim % (2 * self.heads) != 0:
            raise ValueError("dim must be divisible by 2*heads")
        if self.dim % 8 != 0:
            raise ValueError("dim must be divisible by 8")
        for name in (
            "dim", "num_queries", "num_classes", "points_refine",
            "points_init", "levels", "heads", "mix_hidden",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class QuerySet:
    """Batched decoder latent: content (B, N, D) and position (B, N, 4)."""

    content: Tensor
    position: Tensor

    def __post_init__(self):
        cs, ps = self.content.data.shape, self.position.data.shape
        if len(cs) != 3 or len(ps) != 3 or cs[:2] != ps[:2] or ps[2] != 4:
            raise ValueError(f"inconsistent query shapes {cs} / {ps}")

    @property
    def batch(self) -> int:
        return self.content.data.shape[0]

    @property
    def num_queries(self) -> int:
        return self.content.data.shape[1]

    @property
    def dim(self) -> int:
        return self.content.data.shape[2]


@dataclass
class FeaturePyramid:
    """Multi-level feature grids (H_l, W_l, D) plus the image extent."""

    levels: list[np.ndarray]
    image_size: tuple[int, int]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("feature pyramid needs at least one level")
        for lo, hi in zip(self.levels[1:], self.levels):
            if lo.shape[0] != -(-hi.shape[0] // 2) or lo.shape[1] != -(-hi.shape[1] // 2):
                raise ValueError("each level must halve the previous resolution")
        dims = {lv.shape[-1] for lv in self.levels}
        if len(dims) != 1:
            raise ValueError("all levels must share the channel dimension")

    @property
    def dim(self) -> int:
        return self.levels[0].shape[-1]


class ParamRegistry:
    """Named parameter store with group tags and stable ordering."""

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self._group: dict[str, str] = {}

    def add(self, name: str, group: str, value: np.ndarray) -> None:
        if name in self._data:
            raise ValueError(f"duplicate parameter {name!r}")
        self._data[name] = np.asarray(value, dtype=np.float64)
        self._group[name] = group

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def set(self, name: str, value: np.ndarray) -> None:
        if name not in self._data:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {value.shape} != {self._data[name].shape}"
            )
        self._data[name] = value

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self._data)
        return [n for n in self._data if self._group[n] == group]

    def group_of(self, name: str) -> str:
        return self._group[name]

    def count(self, group: str | None = None) -> int:
        return int(sum(self._data[n].size for n in self.names(group)))

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamRegistry":
        out = ParamRegistry()
        for name, value in self._data.items():
            out.add(name, self._group[name], value.copy())
        return out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0):
    std = gain * math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def _add_layer(reg: ParamRegistry, prefix: str, group: str, arch: ArchConfig,
               points: int, rng: np.random.Generator) -> None:
    d = arch.dim
    reg.add(f"{prefix}attn_qkv_w", group, _xavier(rng, d, 3 * d))
    reg.add(f"{prefix}attn_qkv_b", group, np.zeros(3 * d))
    reg.add(f"{prefix}attn_out_w", group, _xavier(rng, d, d, gain=0.5))
    reg.add(f"{prefix}attn_out_b", group, np.zeros(d))
    reg.add(f"{prefix}ln1_g", group, np.ones(d))
    reg.add(f"{prefix}ln1_b", group, np.zeros(d))
    reg.add(f"{prefix}samp_off_w", group, _xavier(rng, d, points * 2, gain=0.5))
    # spread the initial sampling points across the box
    reg.add(f"{prefix}samp_off_b", group, rng.uniform(-1.5, 1.5, size=points * 2))
    reg.add(f"{prefix}samp_lvl_w", group, _xavier(rng, d, arch.levels))
    reg.add(f"{prefix}samp_lvl_b", group, np.zeros(arch.levels))
    reg.add(f"{prefix}mix1_w", group, _xavier(rng, d, arch.mix_hidden))
    reg.add(f"{prefix}mix1_b", group, np.zeros(arch.mix_hidden))
    reg.add(f"{prefix}mix2_w", group, _xavier(rng, points * arch.mix_hidden, d, gain=0.5))
    reg.add(f"{prefix}mix2_b", group, np.zeros(d))
    reg.add(f"{prefix}ln2_g", group, np.ones(d))
    reg.add(f"{prefix}ln2_b", group, np.zeros(d))
    # boxes stay put until the delta head learns to move them
    reg.add(f"{prefix}delta_w", group, np.zeros((d, 4)))
    reg.add(f"{prefix}delta_b", group, np.zeros(4))


def _query_grid(n: int, image_size, rng: np.random.Generator) -> np.ndarray:
    h, w = image_size
    side = math.ceil(math.sqrt(n))
    centers = [
        ((j + 0.5) * w / side, (i + 0.5) * h / side)
        for i in range(side)
        for j in range(side)
    ][:n]
    size = min(h, w) / 3.0
    boxes = np.array(
        [[cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2] for cx, cy in centers]
    )
    return encode_arr(boxes)


def build_params(
    arch: ArchConfig,
    image_size,
    rng: np.random.Generator,
    stacked_layers: int | None = None,
) -> ParamRegistry:
    """Fresh parameter registry.

    stacked_layers=None gives the weight-tied layout (one refine/ set);
    an integer L lays out L independent refinement layers refine/<t>/,
    all tagged with the refine group, for the stacked baseline.
    """
    reg = ParamRegistry()
    d, n, k = arch.dim, arch.num_queries, arch.num_classes
    reg.add("queries/content", "queries", rng.normal(size=(n, d)) / math.sqrt(d))
    reg.add("queries/position", "queries", _query_grid(n, image_size, rng))
    _add_layer(reg, "init/", "init", arch, arch.points_init, rng)
    if stacked_layers is None:
        _add_layer(reg, "refine/", "refine", arch, arch.points_refine, rng)
    else:
        if stacked_layers < 1:
            raise ValueError("stacked_layers must be positive")
        for t in range(stacked_layers):
            _add_layer(reg, f"refine/{t}/", "refine", arch, arch.points_refine, rng)
    reg.add("head/cls1_w", "head", _xavier(rng, d, d))
    reg.add("head/cls1_b", "head", np.zeros(d))
    reg.add("head/cls2_w", "head", _xavier(rng, d, k))
    # start all class scores low so background dominates early
    reg.add("head/cls2_b", "head", np.full(k, -3.0))
    return reg


# --- positional embedding (data only, never taped) ---


def position_embedding(pos: np.ndarray, dim: int, image_size) -> np.ndarray:
    """Sinusoidal features of (x, y, z, r), dim/4 channels per component.

    Centers are scaled to [0, 2*pi] over the image's long side; scale and
    aspect enter raw (their natural range is already a few units).
    """
    h, w = image_size
    n_pairs = dim // 8
    freqs = 100.0 ** (-np.arange(n_pairs) / n_pairs)
    comps = [
        pos[..., 0] * (2.0 * math.pi / max(h, w)),
        pos[..., 1] * (2.0 * math.pi / max(h, w)),
        pos[..., 2],
        pos[..., 3],
    ]
    feats = []
    for c in comps:
        ang = c[..., None] * freqs
        feats.append(np.sin(ang))
        feats.append(np.cos(ang))
    return np.concatenate(feats, axis=-1)


# --- layer forward ---


def _linear(x: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    return tc.add(tc.matmul(x, P[f"{name}_w"]), P[f"{name}_b"])


def _ln(x: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    return tc.add(tc.mul(tc.layer_norm(x), P[f"{name}_g"]), P[f"{name}_b"])


def _attention(q_in: Tensor, P: Mapping[str, Tensor], prefix: str, arch: ArchConfig) -> Tensor:
    d, heads = arch.dim, arch.heads
    dh = d // heads
    qkv = _linear(q_in, P, f"{prefix}attn_qkv")  # (B, N, 3D)
    outs = []
    for hd in range(heads):
        base = hd * dh
        qh = tc.narrow(qkv, (Ellipsis, slice(base, base + dh)))
        kh = tc.narrow(qkv, (Ellipsis, slice(d + base, d + base + dh)))
        vh = tc.narrow(qkv, (Ellipsis, slice(2 * d + base, 2 * d + base + dh)))
        scores = tc.scale(tc.matmul(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
        outs.append(tc.matmul(tc.softmax(scores, axis=-1), vh))
    return _linear(tc.concat(outs, axis=-1), P, f"{prefix}attn_out")


def _sample_features(
    content: Tensor,
    pos_data: np.ndarray,
    feats: Sequence[Tensor],
    image_size,
    P: Mapping[str, Tensor],
    prefix: str,
    arch: ArchConfig,
    points: int,
) -> Tensor:
    """In-box sampling: tanh offsets inside the decoded box, bilinear taps
    per pyramid level, softmax-weighted level mixture. Box geometry comes
    from position data and is constant to the tape."""
    b, n = pos_data.shape[:2]
    cx = pos_data[..., 0][..., None, None]  # (B, N, 1, 1)
    cy = pos_data[..., 1][..., None, None]
    half_w = np.exp2(pos_data[..., 2] - pos_data[..., 3] / 2.0)[..., None, None] / 2.0
    half_h = np.exp2(pos_data[..., 2] + pos_data[..., 3] / 2.0)[..., None, None] / 2.0

    off = tc.reshape(_linear(content, P, f"{prefix}samp_off"), (b, n, points, 2))
    off = tc.tanh(off)
    ox = tc.narrow(off, (Ellipsis, slice(0, 1)))  # (B, N, S, 1)
    oy = tc.narrow(off, (Ellipsis, slice(1, 2)))
    px = tc.add(tc.mul(ox, tc.constant(half_w)), tc.constant(cx))
    py = tc.add(tc.mul(oy, tc.constant(half_h)), tc.constant(cy))

    lvl = tc.softmax(_linear(content, P, f"{prefix}samp_lvl"), axis=-1)  # (B, N, L)
    h_img, w_img = image_size
    mixed = None
    for li, fmap in enumerate(feats):
        h_l, w_l = fmap.data.shape[-3], fmap.data.shape[-2]
        # pixel p sits at the center of grid cell p/stride - 0.5
        row = tc.add(tc.scale(py, h_l / h_img), tc.constant(-0.5))
        col = tc.add(tc.scale(px, w_l / w_img), tc.constant(-0.5))
        pts = tc.reshape(tc.concat([row, col], axis=-1), (b, n * points, 2))
        tap = tc.reshape(tc.bilinear_sample(fmap, pts), (b, n, points, arch.dim))
        w_l_t = tc.reshape(tc.narrow(lvl, (Ellipsis, slice(li, li + 1))), (b, n, 1, 1))
        term = tc.mul(tap, w_l_t)
        mixed = term if mixed is None else tc.add(mixed, term)
    return mixed  # (B, N, S, D)


def _layer_apply(
    P: Mapping[str, Tensor],
    prefix: str,
    feats: Sequence[Tensor],
    image_size,
    y: QuerySet,
    arch: ArchConfig,
    points: int,
    detach_position: bool,
    group_label: str,
) -> QuerySet:
    tape = tc.active_tape()
    if tape is not None:
        tape.mark_group(group_label)

    pos_in = tc.detach(y.position) if detach_position else y.position
    pos_data = pos_in.data
    b, n = pos_data.shape[:2]

    embed = tc.constant(position_embedding(pos_data, arch.dim, image_size))
    attn = _attention(tc.add(y.content, embed), P, prefix, arch)
    content = _ln(tc.add(y.content, attn), P, f"{prefix}ln1")

    sampled = _sample_features(
        content, pos_data, feats, image_size, P, prefix, arch, points
    )
    hidden = tc.gelu(tc.add(tc.matmul(sampled, P[f"{prefix}mix1_w"]), P[f"{prefix}mix1_b"]))
    flat = tc.reshape(hidden, (b, n, points * arch.mix_hidden))
    mix = tc.add(tc.matmul(flat, P[f"{prefix}mix2_w"]), P[f"{prefix}mix2_b"])
    content = _ln(tc.add(content, mix), P, f"{prefix}ln2")

    delta = tc.add(tc.matmul(content, P[f"{prefix}delta_w"]), P[f"{prefix}delta_b"])
    # center deltas move in units of the box scale 2^z
    sv = np.ones_like(pos_data)
    sv[..., 0] = sv[..., 1] = np.exp2(pos_data[..., 2])
    pos_out = tc.add(pos_in, tc.mul(delta, tc.constant(sv)))
    return QuerySet(content, pos_out)


def init_layer(
    P: Mapping[str, Tensor],
    feats: Sequence[Tensor],
    image_size,
    y0_minus: QuerySet,
    arch: ArchConfig,
) -> QuerySet:
    """Content-aware starting point from the learnable queries; denser
    sampling than a refinement step and a position that stays attached."""
    return _layer_apply(
        P, "init/", feats, image_size, y0_minus, arch,
        points=arch.points_init, detach_position=False, group_label="init",
    )


def refinement_layer(
    P: Mapping[str, Tensor],
    feats: Sequence[Tensor],
    image_size,
    y: QuerySet,
    arch: ArchConfig,
    prefix: str = "refine/",
) -> QuerySet:
    """One weight-tied refinement application; the incoming position is
    detached so the step's position Jacobian block is zero."""
    return _layer_apply(
        P, prefix, feats, image_size, y, arch,
        points=arch.points_refine, detach_position=True, group_label="refine",
    )


def predict_head(P: Mapping[str, Tensor], y: QuerySet, arch: ArchConfig):
    """Shared head: class logits from content, boxes decoded from position."""
    hidden = tc.gelu(tc.add(tc.matmul(y.content, P["head/cls1_w"]), P["head/cls1_b"]))
    logits = tc.add(tc.matmul(hidden, P["head/cls2_w"]), P["head/cls2_b"])
    boxes = decode_pos_t(y.position)
    return logits, boxes


def broadcast_queries(P: Mapping[str, Tensor], batch: int, arch: ArchConfig) -> QuerySet:
    """Tile the learnable (N, D)/(N, 4) queries across a batch, keeping
    them attached so gradients sum over items."""
    n, d = arch.num_queries, arch.dim
    zc = tc.constant(np.zeros((batch, n, d)))
    zp = tc.constant(np.zeros((batch, n, 4)))
    content = tc.add(tc.reshape(P["queries/content"], (1, n, d)), zc)
    position = tc.add(tc.reshape(P["queries/position"], (1, n, 4)), zp)
    return QuerySet(content, position)


# --- latent packing for generic fixed-point code ---


def pack_queries(y: QuerySet) -> np.ndarray:
    """Flatten a query set to one vector (content first, then position)."""
    return np.concatenate([y.content.data.ravel(), y.position.data.ravel()])


def unpack_queries_t(vec: Tensor, batch: int, n: int, d: int) -> QuerySet:
    """Taped inverse of pack_queries."""
    split = batch * n * d
    content = tc.reshape(tc.narrow(vec, (slice(0, split),)), (batch, n, d))
    position = tc.reshape(tc.narrow(vec, (slice(split, split + batch * n * 4),)), (batch, n, 4))
    return QuerySet(content, position)


def pack_queries_t(y: QuerySet) -> Tensor:
    """Taped flatten matching pack_queries."""
    b, n, d = y.content.data.shape
    return tc.concat(
        [tc.reshape(y.content, (b * n * d,)), tc.reshape(y.position, (b * n * 4,))],
        axis=0,
    )


# --- perturbation helpers (plain data; the solving path is never taped) ---


def noise_content(q: np.ndarray, sigma_q: float, rng: np.random.Generator) -> np.ndarray:
    """Mix each content row with Gaussian noise of matching L2 norm:
    (1 - sigma) q + sigma * eps, eps ~ N(0, ||q_row||^2 I)."""
    if not 0.0 <= sigma_q <= 1.0:
        raise ValueError("sigma_q must lie in [0, 1]")
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    eps = rng.standard_normal(q.shape) * norms
    return (1.0 - sigma_q) * q + sigma_q * eps


def noise_pos(
    p: np.ndarray,
    sigma_p_frac: float,
    image_size,
    rng: np.random.Generator,
) -> np.ndarray:
    """Jitter decoded corners by sigma_p_frac * max(H, W), re-canonicalize
    (corner flips allowed), keep sides at least 1e-3, re-encode."""
    if sigma_p_frac < 0:
        raise ValueError("sigma_p_frac must be >= 0")
    h, w = image_size
    x, y, z, r = np.moveaxis(p, -1, 0)
    half_w = np.exp2(z - r / 2.0) / 2.0
    half_h = np.exp2(z + r / 2.0) / 2.0
    corners = np.stack([x - half_w, y - half_h, x + half_w, y + half_h], axis=-1)
    noisy = corners + rng.standard_normal(corners.shape) * (sigma_p_frac * max(h, w))
    x1 = np.minimum(noisy[..., 0], noisy[..., 2])
    x2 = np.maximum(noisy[..., 0], noisy[..., 2])
    y1 = np.minimum(noisy[..., 1], noisy[..., 3])
    y2 = np.maximum(noisy[..., 1], noisy[..., 3])
    x2 = np.maximum(x2, x1 + 1e-3)
    y2 = np.maximum(y2, y1 + 1e-3)
    return encode_arr(np.stack([x1, y1, x2, y2], axis=-1))


def rap_step(
    P: Mapping[str, Tensor],
    feats: Sequence[Tensor],
    image_size,
    y: QuerySet,
    arch: ArchConfig,
    v: float,
    sigma_q: float,
    sigma_p_frac: float,
    rng: np.random.Generator,
    prefix: str = "refine/",
) -> QuerySet:
    """One noisy solving step: independent chances v to perturb content
    and position, then a refinement application that projects the noise.
    Runs with recording off regardless of any surrounding tape."""
    if not 0.0 <= v <= 1.0:
        raise ValueError("v must lie in [0, 1]")
    q = y.content.data
    p = y.position.data
    if rng.random() < v:
        q = noise_content(q, sigma_q, rng)
    if rng.random() < v:
        p = noise_pos(p, sigma_p_frac, image_size, rng)
    with tc.no_grad():
        out = refinement_layer(
            P, feats, image_size,
            QuerySet(tc.constant(q), tc.constant(p)), arch, prefix=prefix,
        )
    return QuerySet(tc.constant(out.content.data), tc.constant(out.position.data))
