"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus an optional node id on the active Tape.
Primitives record nodes only while grad recording is enabled and a tape
is active, so inference and fixed-point solving run as plain numpy.
Gradients flow backward over the recorded nodes; leaves are registered
explicitly and collect the results.

The op set is deliberately small. Anything else (elementwise max, abs,
powers, division by a positive quantity) is composed from it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "apply_primitive",
    "backward",
    "bilinear_sample",
    "concat",
    "constant",
    "detach",
    "exp",
    "finite_diff_grad",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "leaf",
    "log",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sub",
    "take",
    "tanh",
    "use_tape",
    "vjp",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when an op is applied to incompatible shapes."""


class _Node:
    __slots__ = ("kind", "inputs", "saved", "attrs")

    def __init__(self, kind, inputs, saved, attrs):
        self.kind = kind
        self.inputs = inputs  # tuple of node ids, -1 for untaped inputs
        self.saved = saved
        self.attrs = attrs


class Tape:
    """Ordered record of primitive applications plus registered leaves.

    node_count() counts primitive applications only, not leaves.
    Groups are labels dropped by composite blocks (for example one label
    per taped refinement application) so tests can count them exactly.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.groups: list[str] = []
        self._leaf_ids: list[int] = []

    def node_count(self) -> int:
        return len(self.nodes) - len(self._leaf_ids)

    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(self._leaf_ids)

    def group_count(self, label: str) -> int:
        return sum(1 for g in self.groups if g == label)

    def mark_group(self, label: str) -> None:
        if _STATE.grad and _STATE.tape is self:
            self.groups.append(label)


class _State:
    __slots__ = ("tape", "grad")

    def __init__(self):
        self.tape: Tape | None = None
        self.grad = True


_STATE = _State()


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = _STATE.tape
    _STATE.tape = tape
    try:
        yield tape
    finally:
        _STATE.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _STATE.grad
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = prev


def grad_enabled() -> bool:
    return _STATE.grad and _STATE.tape is not None


def active_tape() -> Tape | None:
    return _STATE.tape


class Tensor:
    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: int | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def leaf(x) -> Tensor:
    """Register x as a gradient-collecting leaf on the active tape."""
    tape = _STATE.tape
    if tape is None:
        raise RuntimeError("leaf() requires an active tape")
    data = np.asarray(x, dtype=np.float64)
    tape.nodes.append(_Node("leaf", (), data.shape, None))
    nid = len(tape.nodes) - 1
    tape._leaf_ids.append(nid)
    return Tensor(data, nid)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data, None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --- forward rules: (input arrays, attrs) -> (output array, saved) ---


def _fw_add(xs, attrs):
    return xs[0] + xs[1], (xs[0].shape, xs[1].shape)


def _fw_sub(xs, attrs):
    return xs[0] - xs[1], (xs[0].shape, xs[1].shape)


def _fw_mul(xs, attrs):
    return xs[0] * xs[1], (xs[0], xs[1])


def _fw_matmul(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    tb = attrs[0]
    ka = a.shape[-1]
    kb = b.shape[-1] if tb else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul contraction mismatch: {a.shape} @ {b.shape} (tb={tb})")
    out = a @ _swap(b) if tb else a @ b
    return out, (a, b)


def _fw_relu(xs, attrs):
    x = xs[0]
    mask = x > 0
    return np.where(mask, x, 0.0), (mask,)


def _fw_gelu(xs, attrs):
    x = xs[0]
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def _fw_tanh(xs, attrs):
    y = np.tanh(xs[0])
    return y, (y,)


def _fw_sigmoid(xs, attrs):
    x = xs[0]
    z = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return y, (y,)


def _fw_softmax(xs, attrs):
    axis = attrs[0]
    x = xs[0]
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y,)


def _fw_log(xs, attrs):
    return np.log(xs[0]), (xs[0],)


def _fw_exp(xs, attrs):
    y = np.exp(xs[0])
    return y, (y,)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _fw_sum(xs, attrs):
    x = xs[0]
    axis = _norm_axis(attrs[0], x.ndim)
    return x.sum(axis=axis), (x.shape, axis)


def _fw_mean(xs, attrs):
    x = xs[0]
    axis = _norm_axis(attrs[0], x.ndim)
    return x.mean(axis=axis), (x.shape, axis)


def _fw_layer_norm(xs, attrs):
    x = xs[0]
    eps = attrs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


def _fw_concat(xs, attrs):
    axis = attrs[0]
    sizes = tuple(x.shape[axis] for x in xs)
    return np.concatenate(xs, axis=axis), (sizes, axis)


def _fw_slice(xs, attrs):
    x = xs[0]
    mode = attrs[0]
    if mode == "range":
        key = attrs[1]
        return x[key], (x.shape,)
    # mode == "rows": integer gather along the leading axis
    idx = attrs[1]
    return x[idx], (x.shape,)


def _fw_reshape(xs, attrs):
    x = xs[0]
    return x.reshape(attrs[0]), (x.shape,)


def _fw_scale(xs, attrs):
    return xs[0] * attrs[0], ()


def _fw_bilinear(xs, attrs):
    m, pts = xs
    if m.ndim not in (3, 4) or pts.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: map {m.shape}, points {pts.shape}")
    batched = m.ndim == 4
    if batched and (pts.ndim < 2 or pts.shape[0] != m.shape[0]):
        raise ShapeError(f"bilinear_sample: batch mismatch {m.shape} vs {pts.shape}")
    H, W = m.shape[-3], m.shape[-2]
    r = pts[..., 0]
    c = pts[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    # tap order: (r0,c0), (r0,c1), (r1,c0), (r1,c1)
    rr = np.stack([r0, r0, r0 + 1, r0 + 1], axis=-1)
    cc = np.stack([c0, c0 + 1, c0, c0 + 1], axis=-1)
    valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    idx = np.clip(rr, 0, H - 1) * W + np.clip(cc, 0, W - 1)
    w_r = np.stack([1.0 - fr, 1.0 - fr, fr, fr], axis=-1)
    w_c = np.stack([1.0 - fc, fc, 1.0 - fc, fc], axis=-1)
    wv = w_r * w_c * valid
    flat = m.reshape(m.shape[:-3] + (H * W, m.shape[-1]))
    vals = _gather_taps(flat, idx, batched)
    out = np.einsum("...t,...td->...d", wv, vals)
    saved = (m, idx, wv, w_r, w_c, valid, fr, fc, batched)
    return out, saved


def _gather_taps(flat: np.ndarray, idx: np.ndarray, batched: bool) -> np.ndarray:
    # flat: (HW, D) or (B, HW, D); idx: (..., 4) or (B, ..., 4)
    if not batched:
        return flat[idx]
    B = flat.shape[0]
    b = np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1))
    return flat[b, idx]


_FORWARD: dict[str, Callable] = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "relu": _fw_relu,
    "gelu": _fw_gelu,
    "tanh": _fw_tanh,
    "sigmoid": _fw_sigmoid,
    "softmax": _fw_softmax,
    "log": _fw_log,
    "exp": _fw_exp,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "layer_norm": _fw_layer_norm,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "reshape": _fw_reshape,
    "scale": _fw_scale,
    "bilinear_sample": _fw_bilinear,
}


# --- backward rules: (saved, attrs, out grad, needs) -> per-input grads ---


def _bw_add(saved, attrs, g, needs):
    sa, sb = saved
    return (
        _unbroadcast(g, sa) if needs[0] else None,
        _unbroadcast(g, sb) if needs[1] else None,
    )


def _bw_sub(saved, attrs, g, needs):
    sa, sb = saved
    return (
        _unbroadcast(g, sa) if needs[0] else None,
        _unbroadcast(-g, sb) if needs[1] else None,
    )


def _bw_mul(saved, attrs, g, needs):
    a, b = saved
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _bw_matmul(saved, attrs, g, needs):
    a, b = saved
    tb = attrs[0]
    if tb:
        ga = g @ b if needs[0] else None
        gb = _swap(g) @ a if needs[1] else None
    else:
        ga = g @ _swap(b) if needs[0] else None
        gb = _swap(a) @ g if needs[1] else None
    if ga is not None:
        ga = _unbroadcast(ga, a.shape)
    if gb is not None:
        gb = _unbroadcast(gb, b.shape)
    return (ga, gb)


def _bw_relu(saved, attrs, g, needs):
    (mask,) = saved
    return (np.where(mask, g, 0.0),)


def _bw_gelu(saved, attrs, g, needs):
    x, cdf = saved
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (cdf + x * pdf),)


def _bw_tanh(saved, attrs, g, needs):
    (y,) = saved
    return (g * (1.0 - y * y),)


def _bw_sigmoid(saved, attrs, g, needs):
    (y,) = saved
    return (g * y * (1.0 - y),)


def _bw_softmax(saved, attrs, g, needs):
    (y,) = saved
    axis = attrs[0]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _bw_log(saved, attrs, g, needs):
    (x,) = saved
    return (g / x,)


def _bw_exp(saved, attrs, g, needs):
    (y,) = saved
    return (g * y,)


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    gg = g
    for a in sorted(axis):
        gg = np.expand_dims(gg, a)
    return np.broadcast_to(gg, shape)


def _bw_sum(saved, attrs, g, needs):
    shape, axis = saved
    return (_expand_reduced(g, shape, axis),)


def _bw_mean(saved, attrs, g, needs):
    shape, axis = saved
    if axis is None:
        n = int(np.prod(shape))
    else:
        n = int(np.prod([shape[a] for a in axis]))
    return (_expand_reduced(g / n, shape, axis),)


def _bw_layer_norm(saved, attrs, g, needs):
    y, inv = saved
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gym),)


def _bw_concat(saved, attrs, g, needs):
    sizes, axis = saved
    outs = []
    start = 0
    for i, n in enumerate(sizes):
        if needs[i]:
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + n)
            outs.append(g[tuple(key)])
        else:
            outs.append(None)
        start += n
    return tuple(outs)


def _bw_slice(saved, attrs, g, needs):
    (shape,) = saved
    z = np.zeros(shape, dtype=np.float64)
    mode = attrs[0]
    if mode == "range":
        z[attrs[1]] = g
    else:
        np.add.at(z, attrs[1], g)
    return (z,)


def _bw_reshape(saved, attrs, g, needs):
    (shape,) = saved
    return (g.reshape(shape),)


def _bw_scale(saved, attrs, g, needs):
    return (g * attrs[0],)


def _bw_bilinear(saved, attrs, g, needs):
    m, idx, wv, w_r, w_c, valid, fr, fc, batched = saved
    H, W, D = m.shape[-3], m.shape[-2], m.shape[-1]
    gm = gp = None
    need_vals = needs[1]
    flat = m.reshape(m.shape[:-3] + (H * W, D))
    if need_vals:
        vals = _gather_taps(flat, idx, batched)
        # d out / d point = sum over taps of (d weight / d coord) * value
        gv = np.einsum("...d,...td->...t", g, vals)
        sr = np.stack([-w_c[..., 0], -w_c[..., 1], w_c[..., 2], w_c[..., 3]], axis=-1)
        sc = np.stack([-w_r[..., 0], w_r[..., 1], -w_r[..., 2], w_r[..., 3]], axis=-1)
        gr = (gv * sr * valid).sum(axis=-1)
        gc = (gv * sc * valid).sum(axis=-1)
        gp = np.stack([gr, gc], axis=-1)
    if needs[0]:
        gflat = np.zeros_like(flat)
        contrib = wv[..., :, None] * g[..., None, :]
        if batched:
            B = flat.shape[0]
            for bi in range(B):
                np.add.at(gflat[bi], idx[bi].reshape(-1), contrib[bi].reshape(-1, D))
        else:
            np.add.at(gflat, idx.reshape(-1), contrib.reshape(-1, D))
        gm = gflat.reshape(m.shape)
    return (gm, gp)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "relu": _bw_relu,
    "gelu": _bw_gelu,
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "softmax": _bw_softmax,
    "log": _bw_log,
    "exp": _bw_exp,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "layer_norm": _bw_layer_norm,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "reshape": _bw_reshape,
    "scale": _bw_scale,
    "bilinear_sample": _bw_bilinear,
}

PRIMITIVE_KINDS = frozenset(_FORWARD)


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: tuple = ()) -> Tensor:
    """Apply one primitive, recording a tape node when grads are on."""
    fw = _FORWARD.get(kind)
    if fw is None:
        raise ValueError(f"unknown primitive kind: {kind!r}")
    datas = [t.data for t in inputs]
    out, saved = fw(datas, attrs)
    tape = _STATE.tape
    if tape is not None and _STATE.grad:
        ids = tuple(-1 if t.node is None else t.node for t in inputs)
        if any(i >= 0 for i in ids):
            tape.nodes.append(_Node(kind, ids, saved, attrs))
            return Tensor(out, len(tape.nodes) - 1)
    return Tensor(out, None)


# --- convenience wrappers ---


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", (a, b))


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    return apply_primitive("matmul", (a, b), (transpose_b,))


def relu(t: Tensor) -> Tensor:
    return apply_primitive("relu", (t,))


def gelu(t: Tensor) -> Tensor:
    return apply_primitive("gelu", (t,))


def tanh(t: Tensor) -> Tensor:
    return apply_primitive("tanh", (t,))


def sigmoid(t: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (t,))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", (t,), (axis,))


def log(t: Tensor) -> Tensor:
    return apply_primitive("log", (t,))


def exp(t: Tensor) -> Tensor:
    return apply_primitive("exp", (t,))


def reduce_sum(t: Tensor, axis=None) -> Tensor:
    return apply_primitive("sum", (t,), (axis,))


def reduce_mean(t: Tensor, axis=None) -> Tensor:
    return apply_primitive("mean", (t,), (axis,))


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", (t,), (eps,))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(ts), (axis,))


def narrow(t: Tensor, key) -> Tensor:
    """Contiguous slicing; key is a tuple of slice objects."""
    if not isinstance(key, tuple):
        key = (key,)
    return apply_primitive("slice", (t,), ("range", key))


def take(t: Tensor, idx) -> Tensor:
    """Integer row gather along the leading axis."""
    idx = np.asarray(idx, dtype=np.int64)
    return apply_primitive("slice", (t,), ("rows", idx))


def reshape(t: Tensor, shape) -> Tensor:
    return apply_primitive("reshape", (t,), (tuple(shape),))


def scale(t: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", (t,), (float(c),))


def bilinear_sample(m: Tensor, points: Tensor) -> Tensor:
    """Sample a (B,)H,W,D map at (B,)...,2 points in (row, col) grid units.

    Taps outside the grid read zero; taps, not whole points, are masked,
    so a point crossing the border fades out smoothly.
    """
    return apply_primitive("bilinear_sample", (m, points))


# --- backward pass ---


def vjp(out: Tensor, cotangent: np.ndarray, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Pull cotangent back from `out` to every leaf of the tape.

    Returns a dict keyed by leaf node id; leaves the output does not
    depend on map to None (callers treat that as zero).
    """
    tape = tape or _STATE.tape
    if tape is None:
        raise RuntimeError("vjp() requires a tape")
    if out.node is None:
        return {lid: None for lid in tape._leaf_ids}
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    g0 = np.asarray(cotangent, dtype=np.float64)
    if g0.shape != out.shape:
        g0 = np.broadcast_to(g0, out.shape)
    grads[out.node] = g0
    leaf_set = set(tape._leaf_ids)
    for i in range(out.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.kind == "leaf":
            continue
        needs = tuple(j >= 0 for j in node.inputs)
        gs = _BACKWARD[node.kind](node.saved, node.attrs, g, needs)
        for j, gj in zip(node.inputs, gs):
            if j < 0 or gj is None:
                continue
            if grads[j] is None:
                grads[j] = gj
            else:
                grads[j] = grads[j] + gj
        if i not in leaf_set:
            grads[i] = None
    return {lid: grads[lid] for lid in tape._leaf_ids}


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every leaf; untouched leaves get zeros."""
    tape = tape or _STATE.tape
    if tape is None:
        raise RuntimeError("backward() requires a tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    out = vjp(loss, np.ones(loss.shape), tape)
    return {
        lid: (np.zeros(tape.nodes[lid].saved) if g is None else g)
        for lid, g in out.items()
    }


def finite_diff_grad(
    fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function, coordinate by coordinate.

    Independent of the tape; used as the gradient oracle in tests.
    """
    grads = {}
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(work)
            flat[i] = orig - eps
            fm = fn(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads
