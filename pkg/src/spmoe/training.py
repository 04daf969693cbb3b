"""Optimization, the three-stage training recipe, gradient checks, checkpoints.

Stage 1 aligns encoder features with (synthetic) teacher embeddings under a
cosine loss. Stage 2 pretrains the transformer, instance queries and heads on
the instance-segmentation objective plus router regularizers, with the
encoder frozen. Stage 3 finetunes only the segmentation-query projection and
the mask heads against referring samples, with everything else frozen.

All randomness is derived from (seed, stage, step), so a resumed run
reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derived_rng
from .encoder import superpoint_features
from .errors import ConfigError, DataFormatError, NumericError, VersionError
from .losses import (
    LossWeights,
    cosine_align,
    ft_mask_loss,
    greedy_match,
    inst_loss,
    miou,
    seg_loss,
)
from .model import (
    Model,
    TransformerConfig,
    classify,
    decode_queries,
    forward,
    mask_decode,
    params_fingerprint,
    project_seg_query,
)
from .moe import MoEConfig, balance_loss, z_loss

CKPT_MAGIC = b"SPMOE-CKPT v1\n"


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"          # cosine | poly | constant
    poly_power: float = 0.9
    grad_accum: int = 1
    stage1_steps: int = 200
    stage1_lr: float = 5e-2
    stage2_steps: int = 500
    stage3_steps: int = 300
    stage3_lr: float = 5e-3
    collapse_frac: float = 0.95
    collapse_patience: int = 50
    checkpoint_every: int = 0         # 0 = final checkpoint only

    def validate(self) -> None:
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        if self.schedule not in ("cosine", "poly", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name in ("lr", "stage1_lr", "stage3_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


def lr_at(cfg: TrainConfig, base: float, step: int, total: int) -> float:
    """Learning rate for the given 0-based step."""
    frac = step / max(total, 1)
    if cfg.schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * frac))
    if cfg.schedule == "poly":
        return base * (1.0 - frac) ** cfg.poly_power
    return base


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments.

    Only trainable tensors may be handed in; no state is ever allocated for
    frozen parameters.
    """

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.clear_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2, eps, wd = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, \
            self.cfg.weight_decay
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            if wd:
                p.data *= 1.0 - lr * wd
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**t)
            vhat = self.v[name] / (1 - b2**t)
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray],
                          step_count: int) -> None:
        for n in self.params:
            self.m[n] = arrays[f"opt.m.{n}"].copy()
            self.v[n] = arrays[f"opt.v.{n}"].copy()
        self.step_count = step_count


class TrainLog:
    """Append-only line-delimited records; deterministic bytes per run."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            # truncate: a run owns its log file
            open(path, "w").close()

    def record(self, **kv) -> None:
        self.records.append(kv)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(kv) + "\n")

    def warnings(self, event: str) -> list[dict]:
        return [r for r in self.records if r.get("event") == event]


def select_params(model: Model, groups: list[str]) -> dict[str, Tensor]:
    by_group = model.param_groups()
    names = [n for g in groups for n in by_group[g]]
    all_params = model.named_params()
    return {n: all_params[n] for n in names}


# -- per-scene loss assembly ---------------------------------------------------


def scene_instance_losses(model: Model, sample, weights: LossWeights,
                          sp_feats: Tensor | None = None,
                          rng: np.random.Generator | None = None,
                          training: bool = False):
    """Forward one scene and assemble the pretraining objective.

    Returns (total loss, component log dict, router states). Queries are
    greedily matched to ground-truth instances by mask IoU; unmatched
    queries are trained toward the background class.
    """
    cfg = model.config
    if sp_feats is None:
        sp_feats = superpoint_features(
            sample.cloud, cfg.voxel_size, sample.partition, model.encoder
        )
    res = forward(model, sp_feats, None, rng=rng, training=training)
    qfeats = decode_queries(model, model.queries, res.tokens)
    cls_logits = classify(qfeats, model.heads)
    mask_logits = mask_decode(qfeats, res.tokens, model.heads)

    sizes = sample.partition.sizes()
    pred = mask_logits.data > 0
    pairs = greedy_match(pred, sample.gt_instances, sizes)

    inst_class = [
        int(np.bincount(sample.sp_class[m > 0]).argmax())
        for m in sample.gt_instances
    ]
    cls_targets = np.full(cfg.n_queries, cfg.background_class, dtype=np.int64)
    for q, g in pairs:
        cls_targets[q] = inst_class[g]

    matched_logits = None
    matched_targets = None
    if pairs:
        rows = np.array([q for q, _ in pairs])
        matched_logits = ad.gather_rows(mask_logits, rows)
        matched_targets = np.stack([sample.gt_instances[g] for _, g in pairs])

    sem_logits = classify(res.tokens, model.heads)
    sem_onehot = np.zeros((sample.partition.n_superpoints, cfg.n_classes))
    sem_onehot[np.arange(sample.partition.n_superpoints), sample.sp_class] = 1.0

    seg, parts = seg_loss(cls_logits, cls_targets, matched_logits,
                          matched_targets, sem_logits, sem_onehot, weights)

    states = [s for _, s in res.router_states]
    if states:
        z = z_loss(ad.concat_rows([s.logits for s in states]))
        blc = None
        if weights.blc > 0:
            terms = [balance_loss(s) for s in states]
            acc = terms[0]
            for t in terms[1:]:
                acc = ad.add(acc, t)
            blc = ad.mul(acc, 1.0 / len(terms))
    else:
        z, blc = Tensor(np.float64(0.0)), None
    parts["z"] = z.item()
    if blc is not None:
        parts["blc"] = blc.item()
    total = inst_loss(seg, z, weights, blc)
    parts["total"] = total.item()
    return total, parts, res.router_states


# -- stages ---------------------------------------------------------------------


def stage1_align(model: Model, scenes, cfg: TrainConfig,
                 log: TrainLog | None = None) -> list[float]:
    """Fit the encoder so superpoint features track the teacher embeddings."""
    cfg.validate()
    for s in scenes:
        if s.teacher_feats is None:
            raise ConfigError("stage 1 needs scenes with teacher features")
        if s.teacher_feats.shape[1] != model.config.dim:
            raise ConfigError(
                f"teacher dim {s.teacher_feats.shape[1]} != model dim "
                f"{model.config.dim}"
            )
    opt = AdamW(select_params(model, ["encoder"]), cfg)
    history = []
    for step in range(cfg.stage1_steps):
        lr = lr_at(cfg, cfg.stage1_lr, step, cfg.stage1_steps)
        opt.zero_grad()
        sample = scenes[step % len(scenes)]
        feats = superpoint_features(
            sample.cloud, model.config.voxel_size, sample.partition, model.encoder
        )
        loss = cosine_align(feats, sample.teacher_feats)
        loss.backward()
        opt.step(lr)
        history.append(loss.item())
        if log is not None:
            log.record(stage=1, step=step, loss=loss.item(), lr=lr)
    return history


def stage2_pretrain(model: Model, scenes, weights: LossWeights, cfg: TrainConfig,
                    log: TrainLog | None = None, start_step: int = 0,
                    optimizer: AdamW | None = None, collapse_state=None,
                    on_checkpoint=None):
    """Optimize the instance objective; encoder stays frozen.

    Returns (history, optimizer, collapse_state) so callers can checkpoint
    and resume mid-stage. collapse_state holds, per MoE layer, the expert
    currently hogging the tokens and for how many consecutive steps.
    """
    cfg.validate()
    weights.validate()
    opt = optimizer or AdamW(
        select_params(model, ["transformer", "heads", "queries"]), cfg
    )
    # frozen encoder means per-scene features are constants: compute once
    feat_cache = [
        Tensor(
            superpoint_features(
                s.cloud, model.config.voxel_size, s.partition, model.encoder
            ).data.copy()
        )
        for s in scenes
    ]
    n_moe = len(model.config.moe_layers)
    if collapse_state is None:
        collapse_state = [[-1, 0] for _ in range(n_moe)]
    history = []
    for step in range(start_step, cfg.stage2_steps):
        lr = lr_at(cfg, cfg.lr, step, cfg.stage2_steps)
        opt.zero_grad()
        step_parts = None
        loads = None
        for a in range(cfg.grad_accum):
            idx = (step * cfg.grad_accum + a) % len(scenes)
            rng = derived_rng(cfg.seed, "stage2", step, a)
            total, parts, router_states = scene_instance_losses(
                model, scenes[idx], weights, sp_feats=feat_cache[idx],
                rng=rng, training=True,
            )
            total.backward()
            if a == 0:
                step_parts = parts
                loads = [s.load.tolist() for _, s in router_states]
        opt.step(lr)
        history.append(step_parts["total"])

        # collapse: one particular expert keeps >collapse_frac of a layer's
        # tokens for collapse_patience consecutive steps
        events = []
        for li, layer_load in enumerate(loads):
            total_load = sum(layer_load)
            top = int(np.argmax(layer_load))
            hogging = (
                len(layer_load) > 1
                and total_load > 0
                and layer_load[top] > cfg.collapse_frac * total_load
            )
            if hogging and collapse_state[li][0] == top:
                collapse_state[li][1] += 1
            elif hogging:
                collapse_state[li] = [top, 1]
            else:
                collapse_state[li] = [-1, 0]
            if collapse_state[li][1] >= cfg.collapse_patience:
                events.append((li, top, collapse_state[li][1]))
        if log is not None:
            log.record(stage=2, step=step, lr=lr, loads=loads, **step_parts)
            for li, expert, run in events:
                log.record(stage=2, step=step, event="expert_collapse",
                           layer=li, expert=expert, run=run)
        if on_checkpoint is not None and cfg.checkpoint_every:
            if (step + 1) % cfg.checkpoint_every == 0:
                on_checkpoint(step + 1, opt, collapse_state)
    return history, opt, collapse_state


@dataclass
class ReferringSample:
    """One synthetic referring query: a hidden vector naming a class of a
    scene, referencing every instance of that class (possibly several)."""

    scene_index: int
    hidden: np.ndarray            # (seg_channels,)
    gt_masks: list[np.ndarray]    # referenced instances, (L,) each


def make_referring_set(scenes, seed: int, seg_dim: int,
                       noise: float = 0.02) -> list[ReferringSample]:
    """Class-conditioned queries over generated scenes.

    The hidden vector is a noisy one-hot of the referenced class, standing in
    for an upstream hidden state; the reference covers all instances of that
    class so multi-object (merged-mask) cases occur naturally.
    """
    rng = derived_rng(seed, "referring")
    samples = []
    for i, s in enumerate(scenes):
        inst_class = [
            int(np.bincount(s.sp_class[m > 0]).argmax()) for m in s.gt_instances
        ]
        for c in sorted(set(inst_class)):
            if c >= seg_dim:
                raise ConfigError("seg_dim too small for one-hot class queries")
            hidden = np.zeros(seg_dim)
            hidden[c] = 1.0
            hidden += rng.normal(0.0, noise, seg_dim)
            refs = [m for m, ic in zip(s.gt_instances, inst_class) if ic == c]
            samples.append(ReferringSample(i, hidden, refs))
    return samples


def referring_miou(model: Model, scenes, samples, token_cache=None,
                   merge: bool = True) -> float:
    """Decode every referring sample and score merged-mask mIoU."""
    if token_cache is None:
        token_cache = build_token_cache(model, scenes)
    per_scene_sizes = [s.partition.sizes() for s in scenes]
    ious = []
    for ref in samples:
        tokens = token_cache[ref.scene_index]
        seg = project_seg_query(model, Tensor(ref.hidden[None, :]))
        q = decode_queries(model, seg, tokens)
        logits = mask_decode(q, tokens, model.heads)
        pred = logits.data[0] > 0
        ious.append(
            miou([pred], [ref.gt_masks], per_scene_sizes[ref.scene_index],
                 merge=merge)
        )
    return float(np.mean(ious))


def build_token_cache(model: Model, scenes) -> list[Tensor]:
    """Final superpoint tokens per scene, detached (frozen upstream)."""
    cache = []
    for s in scenes:
        feats = superpoint_features(
            s.cloud, model.config.voxel_size, s.partition, model.encoder
        )
        res = forward(model, Tensor(feats.data.copy()))
        cache.append(Tensor(res.tokens.data.copy()))
    return cache


def stage3_mask_finetune(model: Model, scenes, samples, cfg: TrainConfig,
                         lam_m: float = 1.0, log: TrainLog | None = None):
    """Train the seg-query projection and mask heads; everything else frozen.

    Returns (history, train mIoU, frozen-group fingerprint before/after).
    """
    cfg.validate()
    frozen_groups = ["encoder", "transformer", "queries"]
    fingerprint_before = params_fingerprint(
        {n: p for g in frozen_groups
         for n, p in select_params(model, [g]).items()}
    )
    trainable = select_params(model, ["seg_proj"])
    heads = model.heads
    for n, p in heads.named().items():
        if "mask" in n:
            trainable[n] = p
    opt = AdamW(trainable, cfg)
    token_cache = build_token_cache(model, scenes)
    history = []
    for step in range(cfg.stage3_steps):
        lr = lr_at(cfg, cfg.stage3_lr, step, cfg.stage3_steps)
        opt.zero_grad()
        ref = samples[step % len(samples)]
        tokens = token_cache[ref.scene_index]
        seg = project_seg_query(model, Tensor(ref.hidden[None, :]))
        q = decode_queries(model, seg, tokens)
        logits = mask_decode(q, tokens, model.heads)
        gt_union = np.any(np.stack([m.astype(bool) for m in ref.gt_masks]), axis=0)
        loss = ft_mask_loss(logits, gt_union[None, :].astype(float), lam_m)
        loss.backward()
        opt.step(lr)
        history.append(loss.item())
        if log is not None:
            log.record(stage=3, step=step, loss=loss.item(), lr=lr)
    fingerprint_after = params_fingerprint(
        {n: p for g in frozen_groups
         for n, p in select_params(model, [g]).items()}
    )
    train_miou = referring_miou(model, scenes, samples, token_cache)
    return history, train_miou, (fingerprint_before, fingerprint_after)


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst: list = field(default_factory=list)   # (name, index, analytic, numeric)

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_err.values())

    def overall(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0


def gradcheck(build_loss, params: dict[str, Tensor], h: float = 1e-5,
              tol: float = 1e-4, max_entries: int | None = None,
              seed: int = 0) -> GradCheckReport:
    """Central finite differences against analytic gradients, in f64.

    ``build_loss`` must rebuild the scalar loss from current parameter data
    on every call (dropout off). ``max_entries`` caps the probed entries per
    parameter (seeded choice) to bound runtime on large groups.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ConfigError("gradient checks require 64-bit parameters")
    ad.clear_grads(params.values())
    loss = build_loss()
    loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else
                    np.zeros_like(p.data)) for n, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_entries = flat.size
        idx = np.arange(n_entries)
        if max_entries is not None and n_entries > max_entries:
            idx = rng.choice(n_entries, size=max_entries, replace=False)
        worst = 0.0
        worst_entry = None
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            denom = max(abs(a_flat[i]), abs(num), 1e-6)
            rel = abs(a_flat[i] - num) / denom
            if rel > worst:
                worst = rel
                worst_entry = (name, int(i), float(a_flat[i]), float(num))
        report.max_rel_err[name] = worst
        if worst_entry is not None and worst > tol:
            report.worst.append(worst_entry)
    return report


# -- checkpoints --------------------------------------------------------------------


def config_to_dict(cfg: TransformerConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["moe_layers"] = list(d["moe_layers"])
    return d


def config_from_dict(d: dict) -> TransformerConfig:
    d = dict(d)
    moe = MoEConfig(**d.pop("moe"))
    d["moe_layers"] = tuple(d["moe_layers"])
    return TransformerConfig(moe=moe, **d)


def save_checkpoint(path, model: Model, optimizer: AdamW | None = None,
                    step: int = 0, seed: int = 0, phase: str = "final",
                    extra: dict | None = None) -> None:
    """Versioned, checksummed binary checkpoint; atomic write."""
    arrays: dict[str, np.ndarray] = {
        n: p.data for n, p in model.named_params().items()
    }
    opt_meta = None
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        opt_meta = {
            "names": list(optimizer.params),
            "step_count": optimizer.step_count,
        }
    index = [
        {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)}
        for n, a in arrays.items()
    ]
    header = {
        "config": config_to_dict(model.config),
        "step": step,
        "seed": seed,
        "phase": phase,
        "optimizer": opt_meta,
        "extra": extra or {},
        "arrays": index,
    }
    payload = bytearray()
    payload += CKPT_MAGIC
    payload += (json.dumps(header, sort_keys=True) + "\n").encode()
    for n, a in arrays.items():
        payload += np.ascontiguousarray(a, dtype=np.float64).tobytes()
    digest = hashlib.sha256(bytes(payload)).hexdigest()
    payload += (digest + "\n").encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(payload))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: Model
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return self.header["step"]

    @property
    def seed(self) -> int:
        return self.header["seed"]

    def restore_optimizer(self, optimizer: AdamW) -> None:
        meta = self.header["optimizer"]
        if meta is None:
            raise DataFormatError("checkpoint carries no optimizer state")
        if list(optimizer.params) != meta["names"]:
            raise DataFormatError("optimizer parameter set mismatch")
        optimizer.load_state_arrays(self.arrays, meta["step_count"])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"SPMOE-CKPT "):
        raise DataFormatError("not a checkpoint file")
    if not blob.startswith(CKPT_MAGIC):
        found = blob.split(b"\n", 1)[0].decode(errors="replace")
        raise VersionError(f"unsupported checkpoint version {found!r}")
    # trailing 65 bytes are the sha256 hex digest of everything before, + LF
    if len(blob) < len(CKPT_MAGIC) + 65:
        raise DataFormatError("checkpoint truncated")
    body, digest_line = blob[:-65], blob[-65:]
    if hashlib.sha256(body).hexdigest() != digest_line.strip().decode():
        raise DataFormatError("checkpoint checksum mismatch")
    rest = body[len(CKPT_MAGIC):]
    header_line, rest = rest.split(b"\n", 1)
    header = json.loads(header_line)
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * 8
        arr = np.frombuffer(rest[offset: offset + nbytes], dtype=np.float64)
        if arr.size != n:
            raise DataFormatError("checkpoint truncated")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    model = Model.init(config_from_dict(header["config"]), seed=header["seed"])
    named = model.named_params()
    for name, p in named.items():
        if name not in arrays:
            raise DataFormatError(f"checkpoint missing parameter {name}")
        p.data = arrays[name].astype(p.data.dtype)
    return Checkpoint(model=model, header=header, arrays=arrays)
