"""Box geometry: corner boxes, the (x, y, z, r) positional encoding,
delta updates in that space, and IoU / generalized IoU.

The positional vector stores the box center plus log2 scale z and log2
aspect r, so decode gives w = 2**(z - r/2), h = 2**(z + r/2). Center
shifts are scale-relative: a delta moves x and y in units of 2**z.

Scalar Box functions are the reference implementations; the *_arr
variants vectorize over numpy arrays and the *_t variants run on taped
Tensors for loss gradients. Tests hold all three routes together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eqdec import tensor as tc
from eqdec.tensor import Tensor

__all__ = [
    "Box",
    "GeometryError",
    "PositionalVector",
    "apply_box_delta",
    "decode_arr",
    "decode_pos",
    "decode_pos_t",
    "encode_arr",
    "encode_box",
    "giou",
    "giou_matrix",
    "giou_pairs_t",
    "iou",
    "iou_matrix",
]

LN2 = float(np.log(2.0))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form; x1 <= x2 and y1 <= y2 always hold."""

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "Box":
        if w <= 0 or h <= 0:
            raise GeometryError(f"box sides must be positive, got w={w}, h={h}")
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class PositionalVector:
    x: float
    y: float
    z: float  # log2 of sqrt(w*h)
    r: float  # log2 of h/w

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.r], dtype=np.float64)


def encode_box(box: Box) -> PositionalVector:
    w = box.width
    h = box.height
    if w <= 0 or h <= 0:
        raise GeometryError(f"cannot encode degenerate box {box}")
    return PositionalVector(
        x=(box.x1 + box.x2) / 2,
        y=(box.y1 + box.y2) / 2,
        z=float(np.log2(np.sqrt(w * h))),
        r=float(np.log2(h / w)),
    )


def decode_pos(p: PositionalVector) -> Box:
    w = 2.0 ** (p.z - p.r / 2)
    h = 2.0 ** (p.z + p.r / 2)
    return Box.from_center(p.x, p.y, w, h)


def apply_box_delta(p: PositionalVector, delta) -> PositionalVector:
    """Center moves in units of 2**z; scale and aspect move additively."""
    dx, dy, dz, dr = (float(d) for d in delta)
    s = 2.0**p.z
    return PositionalVector(p.x + dx * s, p.y + dy * s, p.z + dz, p.r + dr)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        raise GeometryError("iou of two degenerate boxes is undefined")
    return inter / union


def giou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        raise GeometryError("giou of two degenerate boxes is undefined")
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    c_area = cw * ch
    return inter / union - (c_area - union) / c_area


# --- vectorized numpy routes (no grad) ---


def encode_arr(corners: np.ndarray) -> np.ndarray:
    """(..., 4) corner boxes -> (..., 4) positional vectors."""
    x1, y1, x2, y2 = np.moveaxis(corners, -1, 0)
    w = x2 - x1
    h = y2 - y1
    out = np.empty_like(corners)
    out[..., 0] = (x1 + x2) / 2
    out[..., 1] = (y1 + y2) / 2
    out[..., 2] = 0.5 * np.log2(w * h)
    out[..., 3] = np.log2(h / w)
    return out


def decode_arr(pos: np.ndarray) -> np.ndarray:
    """(..., 4) positional vectors -> (..., 4) corner boxes."""
    x, y, z, r = np.moveaxis(pos, -1, 0)
    w = np.exp2(z - r / 2)
    h = np.exp2(z + r / 2)
    out = np.empty_like(pos)
    out[..., 0] = x - w / 2
    out[..., 1] = y - h / 2
    out[..., 2] = x + w / 2
    out[..., 3] = y + h / 2
    return out


def _pairwise_inter_union(a: np.ndarray, b: np.ndarray):
    ax1, ay1, ax2, ay2 = a[:, None, 0], a[:, None, 1], a[:, None, 2], a[:, None, 3]
    bx1, by1, bx2, by2 = b[None, :, 0], b[None, :, 1], b[None, :, 2], b[None, :, 3]
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter, union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes."""
    inter, union = _pairwise_inter_union(a, b)
    return inter / union


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union = _pairwise_inter_union(a, b)
    cw = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    ch = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    c_area = cw * ch
    return inter / union - (c_area - union) / c_area


# --- taped routes ---


def _tmax(a: Tensor, b: Tensor) -> Tensor:
    return tc.add(a, tc.relu(tc.sub(b, a)))


def _tmin(a: Tensor, b: Tensor) -> Tensor:
    return tc.sub(a, tc.relu(tc.sub(a, b)))


def _inv_pos(t: Tensor) -> Tensor:
    # 1/t for strictly positive t, from the primitive set
    return tc.exp(tc.scale(tc.log(t), -1.0))


def decode_pos_t(p: Tensor) -> Tensor:
    """Taped decode of (..., 4) positional vectors to corner boxes."""
    x = tc.narrow(p, (Ellipsis, slice(0, 1)))
    y = tc.narrow(p, (Ellipsis, slice(1, 2)))
    z = tc.narrow(p, (Ellipsis, slice(2, 3)))
    r = tc.narrow(p, (Ellipsis, slice(3, 4)))
    half_r = tc.scale(r, 0.5)
    w = tc.exp(tc.scale(tc.sub(z, half_r), LN2))
    h = tc.exp(tc.scale(tc.add(z, half_r), LN2))
    hw = tc.scale(w, 0.5)
    hh = tc.scale(h, 0.5)
    return tc.concat(
        [tc.sub(x, hw), tc.sub(y, hh), tc.add(x, hw), tc.add(y, hh)], axis=-1
    )


def giou_pairs_t(pred: Tensor, gt: Tensor) -> Tensor:
    """Taped GIoU of paired (P, 4) corner boxes; returns (P, 1)."""

    def col(t, i):
        return tc.narrow(t, (Ellipsis, slice(i, i + 1)))

    px1, py1, px2, py2 = (col(pred, i) for i in range(4))
    gx1, gy1, gx2, gy2 = (col(gt, i) for i in range(4))
    iw = tc.relu(tc.sub(_tmin(px2, gx2), _tmax(px1, gx1)))
    ih = tc.relu(tc.sub(_tmin(py2, gy2), _tmax(py1, gy1)))
    inter = tc.mul(iw, ih)
    area_p = tc.mul(tc.sub(px2, px1), tc.sub(py2, py1))
    area_g = tc.mul(tc.sub(gx2, gx1), tc.sub(gy2, gy1))
    union = tc.sub(tc.add(area_p, area_g), inter)
    cw = tc.sub(_tmax(px2, gx2), _tmin(px1, gx1))
    ch = tc.sub(_tmax(py2, gy2), _tmin(py1, gy1))
    c_area = tc.mul(cw, ch)
    # giou = inter/union - 1 + union/c_area
    t = tc.add(tc.mul(inter, _inv_pos(union)), tc.mul(union, _inv_pos(c_area)))
    return tc.add(t, tc.constant(-1.0))
