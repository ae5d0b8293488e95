"""Training and evaluation harness for the equilibrium decoder.

Three training modes share one decoder:

* deq: the refinement-aware pipeline. The initialization layer and a
  few warm-up refinements are supervised directly; the long solving run
  happens with recording off under stochastic re-noising; snapshots at
  the supervision positions are re-entered with a short recorded unroll
  and supervised. Taped cost per step is h + k * |positions| refinement
  applications (plus the init layer) regardless of how long the solve
  runs.
* rnn: weight-tied refinements trained by full backpropagation through
  time, supervised at every step.
* ffn: a stack of independent refinement layers, supervised at every
  layer.

The exact-IFT estimator replaces the snapshot machinery with a genuine
fixed-point solve and an adjoint pass at the equilibrium.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .decoder import (
    ArchConfig,
    ParamRegistry,
    QuerySet,
    broadcast_queries,
    build_params,
    init_layer,
    pack_queries,
    pack_queries_t,
    predict_head,
    rap_step,
    refinement_layer,
    unpack_queries_t,
)
from .estimators import EstimatorKind, estimate_gradients
from .losses import LossWeights, batch_set_loss, hungarian_match, match_cost
from .metrics import (
    SCORE_THRESHOLD,
    Detections,
    MetricsRecord,
    average_precision,
    grad_norm,
    write_metrics_csv,
)
from .synth import Dataset
from .tensor import Tensor

__all__ = [
    "AdamW",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "evaluate",
    "resolve_estimator",
    "supervision_positions",
    "train",
    "train_step",
]

_MODES = ("ffn", "rnn", "deq")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "deq"
    estimator: str = "neumann"
    T_train: int = 20
    T_infer: int = 25
    m: int = 4
    C: int = 3
    k: int = 2
    h: int = 2
    v: float = 0.2
    sigma_q: float = 0.1
    sigma_p_frac: float = 0.03125
    lambda_focal: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lr: float = 1e-3
    weight_decay: float = 0.1
    grad_clip: float = 0.0
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    num_queries: int = 20
    heads: int = 2
    points_refine: int = 8
    points_init: int = 16
    mix_hidden: int = 16
    solver_tol: float = 1e-8
    adjoint_tol: float = 1e-9
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        EstimatorKind.parse(self.estimator)
        for name in ("T_train", "T_infer", "C", "k", "batch_size", "epochs",
                     "num_queries", "heads", "points_refine", "points_init",
                     "mix_hidden", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.m < 0 or self.h < 0:
            raise ValueError("m and h must be >= 0")
        if not 0.0 <= self.v <= 1.0:
            raise ValueError("v must lie in [0, 1]")
        if not 0.0 <= self.sigma_q <= 1.0:
            raise ValueError("sigma_q must lie in [0, 1]")
        if self.sigma_p_frac < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("bad optimizer or noise setting")

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_focal, self.lambda_l1, self.lambda_giou)


def resolve_estimator(cfg: TrainConfig) -> EstimatorKind:
    """Estimator for a config; a bare 'neumann' takes its depth from cfg.k."""
    kind = EstimatorKind.parse(cfg.estimator)
    if kind.name == "neumann" and ":" not in cfg.estimator:
        kind = EstimatorKind("neumann", k=cfg.k, adjoint_tol=cfg.adjoint_tol)
    elif kind.name == "exact":
        kind = EstimatorKind("exact", adjoint_tol=cfg.adjoint_tol)
    return kind


def supervision_positions(m: int, C: int, T: int) -> tuple[int, ...]:
    """{1, C, 2C, ..., mC, T}, clamped to T, deduplicated, ascending."""
    if m < 0 or C < 1 or T < 1:
        raise ValueError("need m >= 0, C >= 1, T >= 1")
    pos = {1, T}
    for i in range(1, m + 1):
        pos.add(min(i * C, T))
    return tuple(sorted(pos))


def arch_for(cfg: TrainConfig, dataset: Dataset, stacked: bool = False) -> ArchConfig:
    spec = dataset.spec
    return ArchConfig(
        dim=spec.feature_dim,
        num_queries=cfg.num_queries,
        num_classes=spec.num_classes,
        points_refine=cfg.points_refine,
        points_init=cfg.points_init,
        levels=spec.levels,
        heads=cfg.heads,
        mix_hidden=cfg.mix_hidden,
    )


# --- optimizer ---


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay applies to matrices only, and never to the learnable queries;
    biases and normalization gains stay undecayed.
    """

    def __init__(self, names: Sequence[str], shapes: dict[str, tuple],
                 lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = list(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros(shapes[n]) for n in self.names}
        self.v = {n: np.zeros(shapes[n]) for n in self.names}

    @staticmethod
    def decays(name: str, value: np.ndarray) -> bool:
        return value.ndim >= 2 and not name.startswith("queries")

    def step(self, reg: ParamRegistry, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            update = (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + self.eps)
            p = reg[n] - self.lr * update
            if self.weight_decay and self.decays(n, p):
                p = p - self.lr * self.weight_decay * reg[n]
            reg.set(n, p)


# --- shared step plumbing ---


def _stack_features(pyramids) -> list[np.ndarray]:
    levels = len(pyramids[0].levels)
    return [np.stack([p.levels[l] for p in pyramids]) for l in range(levels)]


def _supervise(P, y: QuerySet, scenes, image_size, arch, w: LossWeights):
    """Match and score one supervised output; returns (loss, breakdown)."""
    logits_t, boxes_t = predict_head(P, y, arch)
    if not (np.all(np.isfinite(logits_t.data)) and np.all(np.isfinite(boxes_t.data))):
        raise TrainingDivergedError("non-finite predictions reached the matcher")
    assignments = []
    for i, scene in enumerate(scenes):
        cost = match_cost(
            logits_t.data[i], boxes_t.data[i], scene.boxes, scene.classes,
            image_size, w,
        )
        assignments.append(hungarian_match(cost))
    return batch_set_loss(
        logits_t, boxes_t,
        [s.boxes for s in scenes], [s.classes for s in scenes],
        image_size, assignments, w,
    )


def _total(losses: Sequence[Tensor]) -> Tensor:
    out = losses[0]
    for term in losses[1:]:
        out = tc.add(out, term)
    return out


def _check_finite(breakdowns, step: int) -> None:
    for pos, bd in enumerate(breakdowns):
        if not all(math.isfinite(v) for v in bd.values()):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}, supervision position {pos}: {bd}"
            )


def _merge_breakdowns(breakdowns) -> dict[str, float]:
    keys = ("focal", "l1", "giou", "total")
    return {k: float(sum(bd[k] for bd in breakdowns)) for k in keys}


def _record(step, breakdowns, grads, residuals, tape) -> MetricsRecord:
    merged = _merge_breakdowns(breakdowns)
    return MetricsRecord(
        step=step,
        total=merged["total"],
        focal=merged["focal"],
        l1=merged["l1"],
        giou=merged["giou"],
        grad_norm=grad_norm(grads),
        position_losses=tuple(bd["total"] for bd in breakdowns),
        residuals=tuple(residuals),
        tape_nodes=tape.node_count() if tape is not None else 0,
        refine_apps=tape.group_count("refine") if tape is not None else 0,
    )


def _clip(grads: dict[str, np.ndarray], limit: float) -> dict[str, np.ndarray]:
    if limit <= 0:
        return grads
    norm = grad_norm(grads)
    if norm <= limit:
        return grads
    scale = limit / norm
    return {n: g * scale for n, g in grads.items()}


# --- mode-specific steps ---


def _step_deq(reg, scenes, feats_np, image_size, arch, cfg, rng, step):
    kind = resolve_estimator(cfg)
    if kind.name == "exact":
        return _step_deq_exact(reg, scenes, feats_np, image_size, arch, cfg, step)
    unroll_k = kind.k
    w = cfg.weights()
    omega = supervision_positions(cfg.m, cfg.C, cfg.T_train)
    tape = tc.Tape()
    with tc.use_tape(tape):
        P = {n: tc.leaf(reg[n]) for n in reg.names()}
        feats = [tc.constant(f) for f in feats_np]
        y0 = init_layer(P, feats, image_size, broadcast_queries(P, len(scenes), arch), arch)
        losses, breakdowns = [], []
        loss, bd = _supervise(P, y0, scenes, image_size, arch, w)
        losses.append(loss)
        breakdowns.append(bd)
        y = y0
        for _ in range(cfg.h):
            y = refinement_layer(P, feats, image_size, y, arch)
            loss, bd = _supervise(P, y, scenes, image_size, arch, w)
            losses.append(loss)
            breakdowns.append(bd)

        # solving path: recording off, per-step stochastic re-noising
        cur = QuerySet(tc.constant(y0.content.data), tc.constant(y0.position.data))
        snapshots, residuals = [], []
        for t in range(1, cfg.T_train + 1):
            nxt = rap_step(P, feats, image_size, cur, arch,
                           cfg.v, cfg.sigma_q, cfg.sigma_p_frac, rng)
            residuals.append(float(np.linalg.norm(pack_queries(nxt) - pack_queries(cur))))
            cur = nxt
            if t in omega:
                snapshots.append((cur.content.data, cur.position.data))

        for content, position in snapshots:
            z = QuerySet(tc.constant(content), tc.constant(position))
            for _ in range(unroll_k):
                z = refinement_layer(P, feats, image_size, z, arch)
            loss, bd = _supervise(P, z, scenes, image_size, arch, w)
            losses.append(loss)
            breakdowns.append(bd)

        _check_finite(breakdowns, step)
        grads = tc.backward(_total(losses), tape)
    named = {n: grads[P[n].node] for n in reg.names()}
    return named, _record(step, breakdowns, named, residuals, tape)


def _refine_param_names(reg: ParamRegistry) -> list[str]:
    return reg.names("refine")


def _step_deq_exact(reg, scenes, feats_np, image_size, arch, cfg, step):
    """Equilibrium training: noise-free solve, adjoint gradients at y*."""
    w = cfg.weights()
    b = len(scenes)
    n, d = arch.num_queries, arch.dim

    tape = tc.Tape()
    with tc.use_tape(tape):
        P = {n_: tc.leaf(reg[n_]) for n_ in reg.names()}
        feats = [tc.constant(f) for f in feats_np]
        y0 = init_layer(P, feats, image_size, broadcast_queries(P, b, arch), arch)
        init_loss, init_bd = _supervise(P, y0, scenes, image_size, arch, w)
        _check_finite([init_bd], step)
        init_grads = tc.backward(init_loss, tape)
    named = {n_: init_grads[P[n_].node] for n_ in reg.names()}

    theta_names = _refine_param_names(reg)

    def f(xs, thetas, y):
        P_f = {name: t for name, t in zip(theta_names, thetas)}
        for name in reg.names():
            if name not in P_f:
                P_f[name] = tc.constant(reg[name])
        feats_f = [tc.constant(fm) for fm in feats_np]
        q = unpack_queries_t(y, b, n, d)
        out = refinement_layer(P_f, feats_f, image_size, q, arch)
        return pack_queries_t(out)

    def F(vec: np.ndarray) -> np.ndarray:
        with tc.use_tape(tc.Tape()):
            with tc.no_grad():
                return f((), [tc.constant(reg[t]) for t in theta_names],
                         tc.constant(vec)).data

    y_vec = pack_queries(y0)
    residuals = []
    for _ in range(cfg.T_train):
        nxt = F(y_vec)
        residuals.append(float(np.linalg.norm(nxt - y_vec)))
        y_vec = nxt
        if residuals[-1] < cfg.solver_tol:
            break

    # equilibrium loss: direct grads for the head, adjoint for theta
    tape2 = tc.Tape()
    with tc.use_tape(tape2):
        P2 = {n_: tc.leaf(reg[n_]) for n_ in reg.names()}
        y_leaf = tc.leaf(y_vec)
        yq = unpack_queries_t(y_leaf, b, n, d)
        eq_loss, eq_bd = _supervise(P2, yq, scenes, image_size, arch, w)
        _check_finite([init_bd, eq_bd], step)
        grads2 = tc.backward(eq_loss, tape2)
    upstream = grads2[y_leaf.node]
    for n_ in reg.names():
        named[n_] = named[n_] + grads2[P2[n_].node]

    kind = resolve_estimator(cfg)
    g_thetas, _ = estimate_gradients(
        kind, f, (), [reg[t] for t in theta_names], y_vec, upstream
    )
    for name, g in zip(theta_names, g_thetas):
        named[name] = named[name] + g

    breakdowns = [init_bd, eq_bd]
    return named, _record(step, breakdowns, named, residuals, tape2)


def _step_rnn(reg, scenes, feats_np, image_size, arch, cfg, step):
    w = cfg.weights()
    tape = tc.Tape()
    with tc.use_tape(tape):
        P = {n: tc.leaf(reg[n]) for n in reg.names()}
        feats = [tc.constant(f) for f in feats_np]
        y = init_layer(P, feats, image_size, broadcast_queries(P, len(scenes), arch), arch)
        losses, breakdowns = [], []
        loss, bd = _supervise(P, y, scenes, image_size, arch, w)
        losses.append(loss)
        breakdowns.append(bd)
        for _ in range(cfg.T_train):
            y = refinement_layer(P, feats, image_size, y, arch)
            loss, bd = _supervise(P, y, scenes, image_size, arch, w)
            losses.append(loss)
            breakdowns.append(bd)
        _check_finite(breakdowns, step)
        grads = tc.backward(_total(losses), tape)
    named = {n: grads[P[n].node] for n in reg.names()}
    return named, _record(step, breakdowns, named, [], tape)


def _step_ffn(reg, scenes, feats_np, image_size, arch, cfg, step):
    w = cfg.weights()
    tape = tc.Tape()
    with tc.use_tape(tape):
        P = {n: tc.leaf(reg[n]) for n in reg.names()}
        feats = [tc.constant(f) for f in feats_np]
        y = init_layer(P, feats, image_size, broadcast_queries(P, len(scenes), arch), arch)
        losses, breakdowns = [], []
        loss, bd = _supervise(P, y, scenes, image_size, arch, w)
        losses.append(loss)
        breakdowns.append(bd)
        for t in range(cfg.T_train):
            y = refinement_layer(P, feats, image_size, y, arch, prefix=f"refine/{t}/")
            loss, bd = _supervise(P, y, scenes, image_size, arch, w)
            losses.append(loss)
            breakdowns.append(bd)
        _check_finite(breakdowns, step)
        grads = tc.backward(_total(losses), tape)
    named = {n: grads[P[n].node] for n in reg.names()}
    return named, _record(step, breakdowns, named, [], tape)


_STEPS: dict[str, Callable] = {"deq": _step_deq, "rnn": _step_rnn, "ffn": _step_ffn}


def train_step(reg, scenes, feats_np, image_size, arch, cfg, rng, step=0):
    """One optimization step's gradients and metrics (no parameter update)."""
    if cfg.mode == "deq":
        return _step_deq(reg, scenes, feats_np, image_size, arch, cfg, rng, step)
    return _STEPS[cfg.mode](reg, scenes, feats_np, image_size, arch, cfg, step)


# --- inference and evaluation ---


def infer(reg: ParamRegistry, pyramids, image_size, arch: ArchConfig,
          cfg: TrainConfig):
    """Noise-free inference: init then T_infer refinements, no recording.

    In ffn mode the stack depth is fixed by the parameters, so T_train
    layers run instead.
    """
    feats_np = _stack_features(pyramids)
    b = len(pyramids)
    with tc.use_tape(tc.Tape()):
        with tc.no_grad():
            P = {n: tc.constant(reg[n]) for n in reg.names()}
            feats = [tc.constant(f) for f in feats_np]
            y = init_layer(P, feats, image_size, broadcast_queries(P, b, arch), arch)
            if cfg.mode == "ffn":
                for t in range(cfg.T_train):
                    y = refinement_layer(P, feats, image_size, y, arch,
                                         prefix=f"refine/{t}/")
            else:
                for _ in range(cfg.T_infer):
                    y = refinement_layer(P, feats, image_size, y, arch)
            logits, boxes = predict_head(P, y, arch)
    scores = 1.0 / (1.0 + np.exp(-logits.data))
    return scores, boxes.data


def evaluate(reg: ParamRegistry, dataset: Dataset, cfg: TrainConfig,
             arch: ArchConfig | None = None,
             score_threshold: float = SCORE_THRESHOLD):
    """AP of the current parameters over a dataset; returns (ap50, ap)."""
    arch = arch or arch_for(cfg, dataset)
    dets = []
    n_scenes = len(dataset)
    for start in range(0, n_scenes, cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, n_scenes))
        pyramids = [dataset.features(i) for i in idx]
        scores, boxes = infer(reg, pyramids, dataset.spec.image_size, arch, cfg)
        for row, i in enumerate(idx):
            s = scores[row]  # (N, K)
            keep = np.nonzero(s >= score_threshold)
            scene = dataset.scenes[i]
            dets.append(Detections(
                boxes=boxes[row][keep[0]],
                scores=s[keep],
                classes=keep[1],
                gt_boxes=scene.boxes,
                gt_classes=scene.classes,
            ))
    return average_precision(dets)


# --- training loop ---


@dataclass
class TrainResult:
    registry: ParamRegistry
    records: list[MetricsRecord]
    config: TrainConfig
    arch: ArchConfig
    ap50: float = math.nan
    ap: float = math.nan
    seconds: float = 0.0


def train(cfg: TrainConfig, dataset: Dataset,
          eval_dataset: Dataset | None = None,
          metrics_path=None,
          progress: Callable[[str], None] | None = None,
          max_steps: int = 0) -> TrainResult:
    """Full training run; deterministic in (cfg, dataset).

    A positive max_steps truncates the run after that many optimizer
    steps without changing anything about the steps that do run, so a
    short replay reproduces the head of a longer run bit for bit.
    """
    stacked = cfg.T_train if cfg.mode == "ffn" else None
    arch = arch_for(cfg, dataset)
    ss = np.random.SeedSequence(cfg.seed)
    params_ss, order_ss, noise_ss = ss.spawn(3)
    reg = build_params(arch, dataset.spec.image_size,
                       np.random.default_rng(params_ss), stacked_layers=stacked)
    order_rng = np.random.default_rng(order_ss)
    noise_rng = np.random.default_rng(noise_ss)

    pyramids = [dataset.features(i) for i in range(len(dataset))]
    opt = AdamW(reg.names(), {n: reg[n].shape for n in reg.names()},
                lr=cfg.lr, weight_decay=cfg.weight_decay)

    records: list[MetricsRecord] = []
    image_size = dataset.spec.image_size
    step = 0
    t0 = time.monotonic()
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(dataset))
        for start in range(0, len(perm), cfg.batch_size):
            if max_steps and step >= max_steps:
                break
            idx = perm[start : start + cfg.batch_size]
            scenes = [dataset.scenes[i] for i in idx]
            feats_np = _stack_features([pyramids[i] for i in idx])
            grads, record = train_step(
                reg, scenes, feats_np, image_size, arch, cfg, noise_rng, step
            )
            if not record.finite() or not all(
                np.all(np.isfinite(g)) for g in grads.values()
            ):
                raise TrainingDivergedError(f"non-finite gradients at step {step}")
            opt.step(reg, _clip(grads, cfg.grad_clip))
            if step % cfg.log_every == 0:
                records.append(record)
            step += 1
        if max_steps and step >= max_steps:
            break
        if progress is not None:
            progress(f"epoch {epoch + 1}/{cfg.epochs} loss {records[-1].total:.4f}")

    result = TrainResult(reg, records, cfg, arch, seconds=time.monotonic() - t0)
    if eval_dataset is not None:
        result.ap50, result.ap = evaluate(reg, eval_dataset, cfg, arch)
        if records:
            records[-1].ap50 = result.ap50
            records[-1].ap = result.ap
    if metrics_path is not None:
        write_metrics_csv(metrics_path, records)
    return result
