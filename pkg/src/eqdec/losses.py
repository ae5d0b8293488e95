"""Set-prediction losses: sigmoid focal classification, L1 and GIoU box
terms, bipartite matching with a cost aligned to those terms, and the
per-item / batched aggregation used during training.

Two parallel routes exist on purpose. Matching costs are plain numpy
(no gradients flow through the assignment decision), while the losses
are built from taped primitives so they can be differentiated. Tests
cross-check the two routes term by term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .geometry import giou_matrix, giou_pairs_t
from .tensor import Tensor

__all__ = [
    "Assignment",
    "LossWeights",
    "batch_set_loss",
    "focal_loss",
    "focal_terms_t",
    "hungarian_match",
    "match_cost",
    "set_loss",
]

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the classification, L1 and GIoU terms."""

    lambda_focal: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        for name in ("lambda_focal", "lambda_l1", "lambda_giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(
            self.lambda_focal * factor,
            self.lambda_l1 * factor,
            self.lambda_giou * factor,
        )


@dataclass(frozen=True)
class Assignment:
    """Injective pairing (prediction index, ground-truth index).

    Predictions absent from the pairing are background.
    """

    pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        preds = [i for i, _ in self.pairs]
        gts = [j for _, j in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError("assignment must be injective in both coordinates")

    def __len__(self) -> int:
        return len(self.pairs)


# --- focal classification loss ---


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))


def _focal_pos_neg(logits: np.ndarray, gamma: float, alpha: float):
    """Per-entry focal terms for target=1 and target=0, numerically stable.

    With p = sigmoid(s): positive term alpha (1-p)^gamma (-log p),
    negative term (1-alpha) p^gamma (-log(1-p)).
    """
    sp = _softplus(logits)    # -log(1-p)
    sn = _softplus(-logits)   # -log p
    pos = alpha * np.exp(-gamma * sp) * sn
    neg = (1.0 - alpha) * np.exp(-gamma * sn) * sp
    return pos, neg


def _target_mask(targets: np.ndarray, n: int, k: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {targets.shape}")
    if targets.max(initial=-1) >= k:
        raise ValueError(f"class index {targets.max()} out of range for {k} classes")
    if targets.min(initial=0) < -1:
        raise ValueError("targets must be class indices or -1 for background")
    mask = np.zeros((n, k), dtype=np.float64)
    rows = np.flatnonzero(targets >= 0)
    mask[rows, targets[rows]] = 1.0
    return mask


def focal_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> float:
    """Mean over all prediction/class binary terms; background rows are
    all-negative. Targets are class indices, -1 meaning background."""
    logits = np.asarray(logits, dtype=np.float64)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n, k = logits.shape
    mask = _target_mask(targets, n, k)
    pos, neg = _focal_pos_neg(logits, gamma, alpha)
    return float(np.mean(mask * pos + (1.0 - mask) * neg))


def _softplus_t(s: Tensor) -> Tensor:
    # relu(s) + log(1 + exp(-|s|)), stable for large |s|
    mag = tc.add(tc.relu(s), tc.relu(tc.scale(s, -1.0)))
    return tc.add(tc.relu(s), tc.log(tc.add(tc.constant(1.0), tc.exp(tc.scale(mag, -1.0)))))


def focal_terms_t(
    logits: Tensor,
    pos_mask: np.ndarray,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> Tensor:
    """Taped per-entry focal terms; pos_mask is 1 where the class is the
    assigned target, 0 elsewhere. Shape follows the logits."""
    mask = tc.constant(pos_mask)
    inv_mask = tc.constant(1.0 - pos_mask)
    sp = _softplus_t(logits)
    sn = _softplus_t(tc.scale(logits, -1.0))
    pos = tc.scale(tc.mul(tc.exp(tc.scale(sp, -gamma)), sn), alpha)
    neg = tc.scale(tc.mul(tc.exp(tc.scale(sn, -gamma)), sp), 1.0 - alpha)
    return tc.add(tc.mul(mask, pos), tc.mul(inv_mask, neg))


# --- bipartite matching ---


def _solve_rows_leq_cols(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for an n x m matrix, n <= m.

    Returns row4col: for each column, the matched row index or -1.
    Potentials form of the O(n^2 m) algorithm; column scans resolve
    ties at the lowest index.
    """
    n, m = cost.shape
    padded = np.zeros((n + 1, m + 1))
    padded[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # matched row per column, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1


def _canonicalize(pairs: list[tuple[int, int]], cost: np.ndarray, n: int, m: int):
    """Cost-preserving rewrites so earlier predictions take lower gt indices.

    Swaps column assignments between pairs, moves a pair to a free
    column, or hands a column to an earlier free prediction whenever the
    total cost is exactly unchanged."""
    pairs.sort()
    matched_cols = {j for _, j in pairs}
    matched_rows = {i for i, _ in pairs}
    free_cols = sorted(set(range(m)) - matched_cols)
    free_rows = sorted(set(range(n)) - matched_rows)
    changed = True
    while changed:
        changed = False
        for a in range(len(pairs)):
            ia, ja = pairs[a]
            for jf in list(free_cols):
                if jf < ja and cost[ia, jf] == cost[ia, ja]:
                    free_cols.remove(jf)
                    free_cols.append(ja)
                    free_cols.sort()
                    pairs[a] = (ia, jf)
                    ia, ja = pairs[a]
                    changed = True
            for b in range(a + 1, len(pairs)):
                ib, jb = pairs[b]
                if jb < ja and cost[ia, jb] + cost[ib, ja] == cost[ia, ja] + cost[ib, jb]:
                    pairs[a] = (ia, jb)
                    pairs[b] = (ib, ja)
                    ia, ja = pairs[a]
                    changed = True
            for irf in list(free_rows):
                if irf < ia and cost[irf, ja] == cost[ia, ja]:
                    free_rows.remove(irf)
                    free_rows.append(ia)
                    free_rows.sort()
                    pairs[a] = (irf, ja)
                    ia, ja = pairs[a]
                    changed = True
        pairs.sort()
    return pairs


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of predictions (rows) to ground
    truths (columns); exactly min(N, M) pairs. Exact ties are resolved
    in favor of lower prediction and ground-truth indices."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-d matrix, got shape {cost.shape}")
    if cost.size and np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite values")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment(())
    if n <= m:
        row4col = _solve_rows_leq_cols(cost)
        pairs = [(int(r), j) for j, r in enumerate(row4col) if r >= 0]
    else:
        col4row = _solve_rows_leq_cols(cost.T)
        pairs = [(i, int(c)) for i, c in enumerate(col4row) if c >= 0]
    pairs = _canonicalize(pairs, cost, n, m)
    return Assignment(tuple(pairs))


# --- matching cost ---


def _norm_factors(image_size) -> np.ndarray:
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError("image_size must be positive (H, W)")
    return np.array([w, h, w, h], dtype=np.float64)


def match_cost(
    logits: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    image_size,
    w: LossWeights,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> np.ndarray:
    """N x M cost mirroring the loss terms on candidate pairs.

    Classification enters as the marginal focal cost of turning the
    candidate class positive (positive term minus the negative term it
    replaces); box terms are the normalized-corner L1 and 1 - GIoU.
    """
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    n, k = logits.shape
    m = gt_classes.shape[0]
    if m == 0:
        return np.zeros((n, 0))
    if gt_classes.max() >= k or gt_classes.min() < 0:
        raise ValueError("ground-truth class out of range")
    pos, neg = _focal_pos_neg(logits, gamma, alpha)
    cls_cost = pos[:, gt_classes] - neg[:, gt_classes]
    scale = _norm_factors(image_size)
    nb = boxes / scale
    ng = gt_boxes / scale
    l1 = np.abs(nb[:, None, :] - ng[None, :, :]).sum(axis=2)
    giou = giou_matrix(boxes, gt_boxes)
    return w.lambda_focal * cls_cost + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - giou)


# --- differentiable aggregation ---


def _abs_t(t: Tensor) -> Tensor:
    return tc.add(tc.relu(t), tc.relu(tc.scale(t, -1.0)))


def set_loss(
    logits: Tensor,
    boxes: Tensor,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    image_size,
    assignment: Assignment,
    w: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted focal + L1 + (1 - GIoU) loss for one item.

    Classification is summed over every prediction and class; box terms
    over matched pairs only; everything divides by max(num_gt, 1). The
    assignment itself is a detached decision: no gradient flows through
    which pairs were chosen. Returns the scalar loss and the weighted
    per-term breakdown.
    """
    n, k = logits.data.shape
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    m = gt_classes.shape[0]
    norm = float(max(m, 1))

    targets = np.full(n, -1, dtype=np.int64)
    for i, j in assignment.pairs:
        if not (0 <= i < n and 0 <= j < m):
            raise ValueError(f"assignment pair ({i}, {j}) out of range")
        targets[i] = gt_classes[j]
    mask = _target_mask(targets, n, k)

    focal_sum = tc.reduce_sum(focal_terms_t(logits, mask))
    total = tc.scale(focal_sum, w.lambda_focal / norm)
    breakdown = {
        "focal": float(total.data),
        "l1": 0.0,
        "giou": 0.0,
    }

    if assignment.pairs:
        pred_idx = [i for i, _ in assignment.pairs]
        gt_idx = [j for _, j in assignment.pairs]
        matched = tc.take(boxes, pred_idx)
        gt_matched = gt_boxes[gt_idx]
        inv = tc.constant(1.0 / _norm_factors(image_size))
        diff = tc.mul(tc.sub(matched, tc.constant(gt_matched)), inv)
        l1_term = tc.scale(tc.reduce_sum(_abs_t(diff)), w.lambda_l1 / norm)
        giou_vals = giou_pairs_t(matched, tc.constant(gt_matched))
        giou_term = tc.scale(
            tc.reduce_sum(tc.sub(tc.constant(1.0), giou_vals)), w.lambda_giou / norm
        )
        breakdown["l1"] = float(l1_term.data)
        breakdown["giou"] = float(giou_term.data)
        total = tc.add(total, tc.add(l1_term, giou_term))

    breakdown["total"] = float(total.data)
    return total, breakdown


def batch_set_loss(
    logits: Tensor,
    boxes: Tensor,
    gt_boxes_list: Sequence[np.ndarray],
    gt_classes_list: Sequence[np.ndarray],
    image_size,
    assignments: Sequence[Assignment],
    w: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Mean of per-item set losses over a batch, assembled in one graph.

    ``logits`` is (B, N, K) and ``boxes`` (B, N, 4); each item keeps its
    own assignment and ground truth. Matched box rows across the whole
    batch are gathered with a single indexed read so the taped graph
    stays shallow. Equivalent to averaging set_loss over the items.
    """
    b, n, k = logits.data.shape
    if not (len(gt_boxes_list) == len(gt_classes_list) == len(assignments) == b):
        raise ValueError("batch size mismatch between tensors and ground truth")

    mask = np.zeros((b, n, k), dtype=np.float64)
    item_w = np.zeros((b, 1, 1), dtype=np.float64)
    flat_idx: list[int] = []
    gt_rows: list[np.ndarray] = []
    pair_w: list[float] = []
    for bi in range(b):
        gtb = np.asarray(gt_boxes_list[bi], dtype=np.float64).reshape(-1, 4)
        gtc = np.asarray(gt_classes_list[bi], dtype=np.int64)
        m = gtc.shape[0]
        norm = float(max(m, 1))
        item_w[bi] = 1.0 / (norm * b)
        targets = np.full(n, -1, dtype=np.int64)
        for i, j in assignments[bi].pairs:
            if not (0 <= i < n and 0 <= j < m):
                raise ValueError(f"assignment pair ({i}, {j}) out of range in item {bi}")
            targets[i] = gtc[j]
            flat_idx.append(bi * n + i)
            gt_rows.append(gtb[j])
            pair_w.append(1.0 / (norm * b))
        mask[bi] = _target_mask(targets, n, k)

    terms = focal_terms_t(logits, mask)
    focal_total = tc.scale(
        tc.reduce_sum(tc.mul(terms, tc.constant(np.broadcast_to(item_w, (b, n, k))))),
        w.lambda_focal,
    )
    total = focal_total
    breakdown = {"focal": float(focal_total.data), "l1": 0.0, "giou": 0.0}

    if flat_idx:
        flat_boxes = tc.reshape(boxes, (b * n, 4))
        matched = tc.take(flat_boxes, flat_idx)
        gt_matched = np.stack(gt_rows)
        weights = tc.constant(np.asarray(pair_w)[:, None])
        inv = tc.constant(1.0 / _norm_factors(image_size))
        diff = tc.mul(tc.sub(matched, tc.constant(gt_matched)), inv)
        l1_rows = tc.reduce_sum(_abs_t(diff), axis=1)
        l1_term = tc.scale(
            tc.reduce_sum(tc.mul(tc.reshape(l1_rows, (len(flat_idx), 1)), weights)),
            w.lambda_l1,
        )
        giou_vals = giou_pairs_t(matched, tc.constant(gt_matched))
        giou_term = tc.scale(
            tc.reduce_sum(tc.mul(tc.sub(tc.constant(1.0), giou_vals), weights)),
            w.lambda_giou,
        )
        breakdown["l1"] = float(l1_term.data)
        breakdown["giou"] = float(giou_term.data)
        total = tc.add(total, tc.add(l1_term, giou_term))

    breakdown["total"] = float(total.data)
    return total, breakdown
