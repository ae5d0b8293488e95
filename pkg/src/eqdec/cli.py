"""Command-line entry points: dataset generation, training, evaluation,
and a gradient-estimator comparison bench.

Config handling: a plain key=value file (one per line, # comments) sets
TrainConfig fields; any field can be overridden with a --<field> flag.
Seed, mode, and estimator are always given explicitly on the command
line so runs are self-describing.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import tensor as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import ArchConfig, QuerySet, build_params, init_layer, pack_queries, \
    pack_queries_t, predict_head, refinement_layer, unpack_queries_t
from .estimators import EstimatorKind, estimate_gradients
from .losses import LossWeights, batch_set_loss, hungarian_match, match_cost
from .synth import DatasetSpec, load_dataset, make_dataset, save_dataset
from .training import TrainConfig, arch_for, evaluate, train

_FIELD_TYPES = {"int": int, "float": float, "str": str}


def _config_fields():
    return [f for f in dataclasses.fields(TrainConfig)]


def _parse_config_file(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def _build_config(args, required) -> TrainConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        raw = _parse_config_file(args.config)
        by_name = {f.name: f for f in _config_fields()}
        for key, text in raw.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _FIELD_TYPES[by_name[key].type](text)
    for f in _config_fields():
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    for name in required:
        if name not in values:
            raise ValueError(f"--{name} is required")
    return TrainConfig(**values)


def _add_config_flags(parser, required=()):
    for f in _config_fields():
        kwargs = {"type": _FIELD_TYPES[f.type], "default": None,
                  "help": f"TrainConfig.{f.name} (default {f.default})"}
        if f.name == "mode":
            kwargs["choices"] = ("ffn", "rnn", "deq")
        if f.name in required:
            kwargs["required"] = True
        parser.add_argument(f"--{f.name}", **kwargs)


def _parse_image_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected HxW, e.g. 128x128") from exc


def _cmd_make_data(args) -> int:
    spec = DatasetSpec(
        num_scenes=args.num_scenes,
        image_size=args.image_size,
        max_objects=args.max_objects,
        num_classes=args.num_classes,
        noise_std=args.noise_std,
        master_seed=args.master_seed,
        feature_dim=args.feature_dim,
        levels=args.levels,
        base_stride=args.base_stride,
    )
    ds = save_dataset(spec, args.out)
    objects = sum(s.num_objects for s in ds.scenes)
    print(f"wrote {args.out}: {len(ds)} scenes, {objects} objects")
    return 0


def _checkpoint_meta(cfg: TrainConfig, spec: DatasetSpec) -> dict[str, str]:
    meta = {f.name: str(getattr(cfg, f.name)) for f in _config_fields()}
    meta.update({
        "data.feature_dim": str(spec.feature_dim),
        "data.levels": str(spec.levels),
        "data.num_classes": str(spec.num_classes),
        "data.image_h": str(spec.image_size[0]),
        "data.image_w": str(spec.image_size[1]),
    })
    return meta


def _config_from_meta(meta: dict[str, str]) -> TrainConfig:
    values = {}
    for f in _config_fields():
        if f.name in meta:
            values[f.name] = _FIELD_TYPES[f.type](meta[f.name])
    return TrainConfig(**values)


def _cmd_train(args) -> int:
    cfg = _build_config(args, required=("seed", "mode", "estimator"))
    dataset = load_dataset(args.data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else dataset
    result = train(
        cfg, dataset, eval_dataset=eval_dataset,
        metrics_path=args.metrics,
        progress=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None,
    )
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.registry,
                        _checkpoint_meta(cfg, dataset.spec))
    print(f"AP50={result.ap50:.4f} AP={result.ap:.4f}")
    return 0


def _cmd_eval(args) -> int:
    reg, meta = load_checkpoint(args.checkpoint)
    cfg = _config_from_meta(meta)
    dataset = load_dataset(args.data)
    arch = ArchConfig(
        dim=int(meta["data.feature_dim"]),
        num_queries=cfg.num_queries,
        num_classes=int(meta["data.num_classes"]),
        points_refine=cfg.points_refine,
        points_init=cfg.points_init,
        levels=int(meta["data.levels"]),
        heads=cfg.heads,
        mix_hidden=cfg.mix_hidden,
    )
    ap50, ap = evaluate(reg, dataset, cfg, arch,
                        score_threshold=args.score_threshold)
    print(f"AP50={ap50:.4f} AP={ap:.4f}")
    return 0


def _cmd_bench_grad(args) -> int:
    """Compare gradient estimators against a tight-tolerance adjoint on a
    small frozen decoder held at its equilibrium."""
    rng = np.random.default_rng(args.seed)
    arch = ArchConfig(dim=16, num_queries=4, num_classes=2, points_refine=2,
                      points_init=4, levels=1, heads=2, mix_hidden=4)
    image_size = (32, 32)
    reg = build_params(arch, image_size, rng)
    feats_np = [0.5 * rng.standard_normal((8, 8, 16))]
    gt_boxes = np.array([[6.0, 8.0, 16.0, 20.0], [18.0, 14.0, 28.0, 26.0]])
    gt_classes = np.array([0, 1])
    w = LossWeights()
    b, n, d = 1, arch.num_queries, arch.dim
    theta_names = reg.names("refine")

    def f(xs, thetas, y):
        P = {name: t for name, t in zip(theta_names, thetas)}
        for name in reg.names():
            if name not in P:
                P[name] = tc.constant(reg[name])
        feats = [tc.constant(fm) for fm in feats_np]
        out = refinement_layer(P, feats, image_size, unpack_queries_t(y, b, n, d), arch)
        return pack_queries_t(out)

    thetas = [reg[t] for t in theta_names]

    def apply_once(vec):
        with tc.use_tape(tc.Tape()):
            with tc.no_grad():
                return f((), [tc.constant(t) for t in thetas], tc.constant(vec)).data

    with tc.use_tape(tc.Tape()):
        with tc.no_grad():
            P = {name: tc.constant(reg[name]) for name in reg.names()}
            feats = [tc.constant(fm) for fm in feats_np]
            qs = QuerySet(tc.constant(0.1 * rng.standard_normal((b, n, d))),
                          tc.constant(reg["queries/position"][None]))
            y0 = init_layer(P, feats, image_size, qs, arch)
    vec = pack_queries(y0)
    for _ in range(200):
        nxt = apply_once(vec)
        if np.linalg.norm(nxt - vec) < 1e-13:
            vec = nxt
            break
        vec = nxt

    tape = tc.Tape()
    with tc.use_tape(tape):
        y_leaf = tc.leaf(vec)
        P = {name: tc.constant(reg[name]) for name in reg.names()}
        yq = unpack_queries_t(y_leaf, b, n, d)
        logits, boxes = predict_head(P, yq, arch)
        cost = match_cost(logits.data[0], boxes.data[0], gt_boxes, gt_classes,
                          image_size, w)
        loss, _ = batch_set_loss(logits, boxes, [gt_boxes], [gt_classes],
                                 image_size, [hungarian_match(cost)], w)
        grads = tc.backward(loss, tape)
    upstream = grads[y_leaf.node]

    def flat(gs):
        return np.concatenate([g.ravel() for g in gs])

    reference, _ = estimate_gradients(
        EstimatorKind("exact", adjoint_tol=1e-13), f, (), thetas, vec, upstream
    )
    ref = flat(reference)
    kinds = [EstimatorKind("jfb"), EstimatorKind("neumann", k=1),
             EstimatorKind("neumann", k=2), EstimatorKind("neumann", k=4),
             EstimatorKind("neumann", k=8), EstimatorKind("exact")]
    print(f"{'estimator':<12} {'rel_err':>12} {'cosine':>10}")
    for kind in kinds:
        g, _ = estimate_gradients(kind, f, (), thetas, vec, upstream)
        gv = flat(g)
        rel = np.linalg.norm(gv - ref) / np.linalg.norm(ref)
        cos = float(gv @ ref / (np.linalg.norm(gv) * np.linalg.norm(ref)))
        print(f"{kind.describe():<12} {rel:>12.3e} {cos:>10.6f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="eqdec",
                                     description="equilibrium decoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate and save a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-scenes", type=int, required=True)
    p.add_argument("--image-size", type=_parse_image_size, default=(128, 128))
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--base-stride", type=int, default=8)
    p.set_defaults(fn=_cmd_make_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--metrics", help="metrics CSV output path")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p, required=("seed", "mode", "estimator"))
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench-grad", help="gradient estimator comparison")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench_grad)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
