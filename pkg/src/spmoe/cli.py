"""Command-line entry point: data generation, training, evaluation, reports.

Subcommands: gen-data, pretrain, eval, profile-flops, ablate,
dump-activations. Report commands write delimited output first and render a
companion PNG figure next to it. Exit codes: 0 success, 1 usage/config
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from . import plots
from .autodiff import LEDGER, Tensor
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyPromptError,
    InvariantError,
    NumericError,
    SpmoeError,
)
from .losses import LossWeights, greedy_match, miou
from .model import Model, TransformerConfig, decode_queries, forward, mask_decode
from .model import classify, project_seg_query
from .moe import MoEConfig, MoELayer, expert_stats, flops_per_token, moe_forward
from .scene import SceneConfig, generate_scene, read_scene, write_scene
from .training import (
    AdamW,
    TrainConfig,
    TrainLog,
    build_token_cache,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    make_referring_set,
    save_checkpoint,
    select_params,
    stage1_align,
    stage2_pretrain,
)
from .encoder import superpoint_features

SEED_ENV = "SPMOE_SEED"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

PLACEMENTS = {
    "shallow": (1, 2, 3),
    "middle": (2, 3, 4),
    "deep": (4, 5, 6),
    "interleaved": (1, 3, 6),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _dataclass_from(cls, data: dict, section: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from exc


def load_run_config(path: str | None):
    """Parse the JSON run config into typed sections; unknown keys rejected."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    known = {"model", "train", "weights", "scene"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model_cfg = (config_from_dict(raw["model"]) if "model" in raw
                 else TransformerConfig())
    train_cfg = _dataclass_from(TrainConfig, raw.get("train", {}), "train")
    weights = _dataclass_from(LossWeights, raw.get("weights", {}), "weights")
    scene_cfg = _dataclass_from(SceneConfig, raw.get("scene", {}), "scene")
    model_cfg.validate()
    train_cfg.validate()
    weights.validate()
    return model_cfg, train_cfg, weights, scene_cfg


def _load_scenes(data_dir: str):
    paths = sorted(glob.glob(os.path.join(data_dir, "scene_*.txt")))
    if not paths:
        raise DataFormatError(f"no scene_*.txt files under {data_dir}")
    return [read_scene(p) for p in paths], paths


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    cfg = SceneConfig(
        n_points=args.points, n_objects=args.objects, n_classes=args.classes,
        split=args.split, noise=args.noise, teacher_dim=args.teacher_dim,
    )
    cfg.validate()
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(args.scenes):
        seed = args.seed + i
        sample = generate_scene(seed, cfg)
        name = f"scene_{i:04d}.txt"
        write_scene(sample, os.path.join(args.out, name))
        back = read_scene(os.path.join(args.out, name))
        back.validate()
        rows.append([name, seed, sample.partition.n_superpoints,
                     len(sample.gt_instances), "ok"])
    manifest = os.path.join(args.out, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "seed", "superpoints", "instances", "status"])
        w.writerows(rows)
    print(f"wrote {args.scenes} scenes + manifest to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg, weights, _ = load_run_config(args.config)
    train_cfg.seed = args.seed if args.seed is not None else train_cfg.seed
    scenes, _ = _load_scenes(args.data)
    for s in scenes:
        if s.teacher_feats is not None and \
                s.teacher_feats.shape[1] != model_cfg.dim:
            raise ConfigError(
                f"scene teacher dim {s.teacher_feats.shape[1]} != model dim "
                f"{model_cfg.dim}; regenerate data with --teacher-dim"
            )
    os.makedirs(args.out, exist_ok=True)
    log = TrainLog(os.path.join(args.out, "train_log.jsonl"))
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")

    if args.resume:
        ck = load_checkpoint(args.resume)
        if config_to_dict(ck.model.config) != config_to_dict(model_cfg):
            raise ConfigError("resume checkpoint was trained with another config")
        model = ck.model
        start_step = ck.step
        collapse_state = ck.header["extra"].get("collapse_state")
        optimizer = AdamW(
            select_params(model, ["transformer", "heads", "queries"]), train_cfg
        )
        ck.restore_optimizer(optimizer)
    else:
        model = Model.init(model_cfg, train_cfg.seed)
        stage1_align(model, scenes, train_cfg, log)
        start_step, collapse_state, optimizer = 0, None, None

    def snapshot(step, opt, state):
        save_checkpoint(
            os.path.join(args.out, f"checkpoint_step{step}.ckpt"),
            model, opt, step=step, seed=train_cfg.seed, phase="stage2",
            extra={"collapse_state": state},
        )

    _, opt, collapse_state = stage2_pretrain(
        model, scenes, weights, train_cfg, log, start_step=start_step,
        optimizer=optimizer, collapse_state=collapse_state,
        on_checkpoint=snapshot if train_cfg.checkpoint_every else None,
    )
    save_checkpoint(ckpt_path, model, opt, step=train_cfg.stage2_steps,
                    seed=train_cfg.seed, phase="stage2",
                    extra={"collapse_state": collapse_state})
    plots.save_training_curve(log.records,
                              os.path.join(args.out, "loss_curve.png"))
    print(f"checkpoint: {ckpt_path}")
    print(f"log:        {log.path}")
    return 0


def _eval_referring(model, scenes, seed, merge, oracle):
    refs = make_referring_set(scenes, seed, model.config.seg_channels)
    cache = build_token_cache(model, scenes)
    sizes = [s.partition.sizes() for s in scenes]
    per_scene = {i: [] for i in range(len(scenes))}
    for ref in refs:
        if oracle:
            pred = np.any(np.stack([m.astype(bool) for m in ref.gt_masks]),
                          axis=0)
        else:
            tokens = cache[ref.scene_index]
            seg = project_seg_query(model, Tensor(ref.hidden[None, :]))
            q = decode_queries(model, seg, tokens)
            pred = mask_decode(q, tokens, model.heads).data[0] > 0
        per_scene[ref.scene_index].append(
            miou([pred], [ref.gt_masks], sizes[ref.scene_index], merge=merge)
        )
    return {i: float(np.mean(v)) for i, v in per_scene.items() if v}


def _eval_instances(model, scenes):
    out = {}
    for i, s in enumerate(scenes):
        feats = superpoint_features(
            s.cloud, model.config.voxel_size, s.partition, model.encoder
        )
        res = forward(model, feats)
        qfeats = decode_queries(model, model.queries, res.tokens)
        mask_logits = mask_decode(qfeats, res.tokens, model.heads)
        pred = mask_logits.data > 0
        sizes = s.partition.sizes()
        pairs = greedy_match(pred, s.gt_instances, sizes)
        ious = [
            miou([pred[q]], [[s.gt_instances[g]]], sizes) for q, g in pairs
        ]
        cls_pred = classify(qfeats, model.heads).data.argmax(axis=1)
        inst_cls = [int(np.bincount(s.sp_class[m > 0]).argmax())
                    for m in s.gt_instances]
        acc = float(np.mean([cls_pred[q] == inst_cls[g] for q, g in pairs]))
        out[i] = (float(np.mean(ious)) if ious else 0.0, acc)
    return out


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    scenes, paths = _load_scenes(args.data)
    names = [os.path.basename(p) for p in paths]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    rows = []
    if args.task == "miou":
        per_scene = _eval_referring(model, scenes, args.seed or ck.seed,
                                    merge=args.merge, oracle=args.oracle)
        values = [per_scene.get(i, float("nan")) for i in range(len(scenes))]
        header = ["scene", "miou"]
    else:
        per_scene = _eval_instances(model, scenes)
        values = [per_scene[i][0] for i in range(len(scenes))]
        header = ["scene", "mask_iou", "cls_acc"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, name in enumerate(names):
            if args.task == "miou":
                w.writerow([name, repr(values[i])])
                rows.append((name, values[i]))
            else:
                w.writerow([name, repr(per_scene[i][0]), repr(per_scene[i][1])])
                rows.append((name, per_scene[i][0]))
        w.writerow(["mean", repr(float(np.nanmean(values)))]
                   + ([] if args.task == "miou" else [""]))
    plots.save_eval_figure([n for n, _ in rows], [v for _, v in rows],
                           os.path.join(args.out, "metrics.png"))
    width = max(len(n) for n, _ in rows)
    for name, v in rows:
        print(f"{name:<{width}}  {v:.4f}")
    print(f"{'mean':<{width}}  {float(np.nanmean(values)):.4f}")
    return 0


def cmd_profile_flops(args) -> int:
    model_cfg, _, _, _ = load_run_config(args.config)
    experts = [int(v) for v in args.experts.split(",")]
    if any(e < 1 for e in experts):
        raise ConfigError("expert counts must be >= 1")
    n_tokens = 64
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((n_tokens, model_cfg.dim))
    rows = []
    for e in experts:
        layer = MoELayer.init(
            np.random.default_rng(e), model_cfg.dim, model_cfg.ffn_hidden, e
        )
        LEDGER.reset()
        moe_forward(Tensor(x), layer, MoEConfig(n_experts=e, top_k=args.top_k))
        measured = LEDGER.total / n_tokens
        analytic = flops_per_token(model_cfg.dim, model_cfg.ffn_hidden, e,
                                   args.top_k)
        if measured != analytic:
            raise NumericError(
                f"ledger ({measured}) disagrees with closed form ({analytic})"
            )
        rows.append((e, analytic))
    dense = 4 * model_cfg.dim * model_cfg.ffn_hidden
    costs = [c for _, c in rows]
    spread = (max(costs) - min(costs)) / min(costs)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "flops.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experts", "flops_per_token", "vs_dense_ffn"])
        w.writerow(["dense", dense, 0])
        for e, c in rows:
            w.writerow([e, c, c - dense])
        w.writerow(["relative_spread", repr(spread), ""])
    plots.save_flops_figure([e for e, _ in rows], costs,
                            os.path.join(args.out, "flops.png"))
    print(f"{'experts':>8}  {'FLOPs/token':>12}  {'vs dense':>9}")
    print(f"{'dense':>8}  {dense:>12}  {0:>9}")
    for e, c in rows:
        print(f"{e:>8}  {c:>12}  {c - dense:>9}")
    print(f"relative spread across expert counts: {spread:.4%}")
    return 0


def _ablation_cells(axis: str, grid: str | None):
    if axis == "experts":
        cells = [int(v) for v in (grid or "1,2,4").split(",")]
        return [(str(c), {"experts": c}) for c in cells]
    if axis == "layers":
        if grid:
            groups = grid.split("|")
            cells = []
            for g in groups:
                if g in PLACEMENTS:
                    cells.append((g, {"layers": PLACEMENTS[g]}))
                else:
                    cells.append((g, {"layers": tuple(int(v)
                                                      for v in g.split(","))}))
            return cells
        return [(name, {"layers": idx}) for name, idx in PLACEMENTS.items()]
    if axis == "zloss":
        cells = [float(v) for v in (grid or "0,1e-4,1e-5").split(",")]
        return [(repr(c), {"zloss": c}) for c in cells]
    if axis == "balance":
        cells = [float(v) for v in (grid or "0,1e-3").split(",")]
        return [(repr(c), {"balance": c}) for c in cells]
    if axis == "topk-policy":
        cells = (grid or "none,all,threshold,random").split(",")
        return [(c, {"policy": c}) for c in cells]
    raise ConfigError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    if args.config:
        model_cfg, train_cfg, weights, _ = load_run_config(args.config)
    else:
        # compact desk-scale defaults so a grid finishes in seconds per cell
        model_cfg = TransformerConfig(dim=32, ffn_hidden=64, heads=4,
                                      encoder_hidden=16, n_queries=6)
        train_cfg = TrainConfig(stage1_steps=60, stage2_steps=args.steps,
                                lr=1e-3)
        weights = LossWeights()
    train_cfg.stage2_steps = args.steps
    scenes, _ = _load_scenes(args.data)
    cells = _ablation_cells(args.axis, args.grid)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for label, patch in cells:
        import dataclasses

        cfg = dataclasses.replace(model_cfg)
        w = dataclasses.replace(weights)
        moe = dataclasses.replace(model_cfg.moe)
        if "experts" in patch:
            moe = dataclasses.replace(moe, n_experts=patch["experts"])
        if "layers" in patch:
            cfg = dataclasses.replace(cfg, moe_layers=patch["layers"])
        if "zloss" in patch:
            w = dataclasses.replace(w, z=patch["zloss"])
        if "balance" in patch:
            w = dataclasses.replace(w, blc=patch["balance"])
        if "policy" in patch:
            moe = dataclasses.replace(moe, second_expert_policy=patch["policy"])
        cfg = dataclasses.replace(cfg, moe=moe)
        cfg.validate()
        seed = args.seed
        model = Model.init(cfg, seed)
        tc = dataclasses.replace(train_cfg, seed=seed)
        if scenes[0].teacher_feats is not None and \
                scenes[0].teacher_feats.shape[1] == cfg.dim:
            stage1_align(model, scenes, tc)
        hist, _, _ = stage2_pretrain(model, scenes, w, tc)
        inst = _eval_instances(model, scenes)
        mean_iou = float(np.mean([v[0] for v in inst.values()]))
        results.append((label, seed, hist[0], hist[-1], mean_iou))
        print(f"{args.axis}={label}: loss {hist[0]:.3f} -> {hist[-1]:.3f}, "
              f"matched-instance IoU {mean_iou:.3f}")
    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "setting", "seed", "loss_first", "loss_last",
                    "mask_iou"])
        for label, seed, l0, l1, mi in results:
            w.writerow([args.axis, label, seed, repr(l0), repr(l1), repr(mi)])
    plots.save_ablation_figure([r[0] for r in results],
                               [r[4] for r in results], "mask_iou", args.axis,
                               os.path.join(args.out, "ablation.png"))
    print(f"wrote {csv_path}")
    return 0


def cmd_dump_activations(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    sample = read_scene(args.scene)
    feats = superpoint_features(
        sample.cloud, model.config.voxel_size, sample.partition, model.encoder
    )
    res = forward(model, feats)
    if not res.router_states:
        raise ConfigError("model has no MoE layers; nothing to dump")
    amap = expert_stats(
        [s for _, s in res.router_states],
        [i for i, _ in res.router_states],
        model.config.moe.n_experts,
    )
    amap.to_container().write(args.out)
    fig_path = os.path.splitext(args.out)[0] + ".png"
    plots.save_activation_figure(sample, amap, fig_path)
    print(f"wrote {args.out} and {fig_path}")
    return 0


# -- wiring -----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="spmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scene files")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--points", type=int, default=1500)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--split", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.003)
    p.add_argument("--teacher-dim", type=int, default=256)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage-1 alignment + stage-2 pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scene files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("miou", "seg"), default="miou")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--merge", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="merge multi-object references before IoU")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (plumbing check)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile-flops",
                       help="analytic per-token cost across expert counts")
    p.add_argument("--config", default=None)
    p.add_argument("--experts", default="1,2,4,6,8")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_profile_flops)

    p = sub.add_parser("ablate", help="desk-scale sweep over one routing axis")
    p.add_argument("--axis", required=True,
                   choices=("experts", "layers", "zloss", "balance",
                            "topk-policy"))
    p.add_argument("--grid", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-activations",
                       help="per-superpoint dominant-expert map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_activations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, InvariantError, EmptyPromptError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SpmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
