"""Superpoint transformer with interleaved dense and MoE blocks.

Each block runs an information-aggregation stage (cross-attention then
self-attention, both wrapped in residual + LayerNorm) followed by a
feed-forward stage that is either a plain FFN or a sparse MoE bank. Three
attention roles share the stage: R1 refines the superpoint sequence
(cross-attention collapses to self-attention), R2 lets prompt tokens query
the scene, R3 decodes segmentation queries against the final features.

Only the superpoint sequence passes through the feed-forward/MoE stage;
prompt and segmentation queries ride the attention stages alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derived_rng
from .encoder import EncoderParams
from .errors import ConfigError, ShapeError
from .moe import Expert, MoEConfig, MoELayer, RouterState, moe_forward

ROLES = ("r1", "r2", "r3")


@dataclass
class TransformerConfig:
    depth: int = 6
    moe_layers: tuple = (1, 3, 6)   # 1-based block indices
    dim: int = 256
    ffn_hidden: int = 1024
    heads: int = 8
    moe: MoEConfig = field(default_factory=MoEConfig)
    n_classes: int = 199            # includes the trailing background class
    n_queries: int = 8
    mask_dim: int = 0               # 0 means "use dim"
    p_drop: float = 0.0
    encoder_hidden: int = 64
    seg_input_dim: int = 0          # 0 means "use dim"
    voxel_size: float = 0.02

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if any(not 1 <= i <= self.depth for i in self.moe_layers):
            raise ConfigError(
                f"moe_layers {self.moe_layers} outside [1, {self.depth}]"
            )
        if len(set(self.moe_layers)) != len(self.moe_layers):
            raise ConfigError("duplicate moe layer index")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes (incl. background)")
        if self.n_queries < 1:
            raise ConfigError("need at least one instance query")
        self.moe.validate()

    @property
    def mask_channels(self) -> int:
        return self.mask_dim or self.dim

    @property
    def seg_channels(self) -> int:
        return self.seg_input_dim or self.dim

    @property
    def background_class(self) -> int:
        return self.n_classes - 1


def _proj(rng, d_in, d_out, scale=1.0):
    return Tensor(scale * rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_out)),
                  requires_grad=True)


# Attention output projections start at 1/8 of the fan-in scale so the
# residual path dominates early training. Without this, repeated attention
# averaging drowns per-token structure in a shared component by the deep
# blocks, and the router (which sees only token features) degenerates to
# picking one expert for every token.
RESIDUAL_BRANCH_INIT = 0.125


@dataclass
class CrossAttentionParams:
    """Per-role query/key/value triplets sharing one output projection."""

    wq: dict[str, Tensor]
    wk: dict[str, Tensor]
    wv: dict[str, Tensor]
    wo: Tensor

    @classmethod
    def init(cls, rng, dim):
        return cls(
            wq={r: _proj(rng, dim, dim) for r in ROLES},
            wk={r: _proj(rng, dim, dim) for r in ROLES},
            wv={r: _proj(rng, dim, dim) for r in ROLES},
            wo=_proj(rng, dim, dim, scale=RESIDUAL_BRANCH_INIT),
        )

    def named(self, prefix):
        out = {f"{prefix}.wo": self.wo}
        for r in ROLES:
            out[f"{prefix}.{r}.wq"] = self.wq[r]
            out[f"{prefix}.{r}.wk"] = self.wk[r]
            out[f"{prefix}.{r}.wv"] = self.wv[r]
        return out


@dataclass
class SelfAttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, rng, dim):
        return cls(wq=_proj(rng, dim, dim), wk=_proj(rng, dim, dim),
                   wv=_proj(rng, dim, dim),
                   wo=_proj(rng, dim, dim, scale=RESIDUAL_BRANCH_INIT))

    def named(self, prefix):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def _ln_params(dim):
    return (Tensor(np.ones(dim), requires_grad=True),
            Tensor(np.zeros(dim), requires_grad=True))


@dataclass
class Block:
    cross: CrossAttentionParams
    selfattn: SelfAttentionParams
    ln_cross: tuple
    ln_self: tuple
    ln_ffn: tuple
    ffn: Expert | MoELayer   # Expert for dense blocks, MoELayer for MoE blocks

    @classmethod
    def init(cls, rng, cfg: TransformerConfig, is_moe: bool):
        if is_moe:
            ffn = MoELayer.init(rng, cfg.dim, cfg.ffn_hidden, cfg.moe.n_experts)
        else:
            ffn = Expert.init(rng, cfg.dim, cfg.ffn_hidden)
        return cls(
            cross=CrossAttentionParams.init(rng, cfg.dim),
            selfattn=SelfAttentionParams.init(rng, cfg.dim),
            ln_cross=_ln_params(cfg.dim),
            ln_self=_ln_params(cfg.dim),
            ln_ffn=_ln_params(cfg.dim),
            ffn=ffn,
        )

    def named(self, prefix):
        out = {}
        out.update(self.cross.named(f"{prefix}.cross"))
        out.update(self.selfattn.named(f"{prefix}.self"))
        for name, (g, b) in (("ln_cross", self.ln_cross),
                             ("ln_self", self.ln_self),
                             ("ln_ffn", self.ln_ffn)):
            out[f"{prefix}.{name}.g"] = g
            out[f"{prefix}.{name}.b"] = b
        out.update(self.ffn.named(f"{prefix}.ffn"))
        return out


@dataclass
class Heads:
    """Linear classification head plus the two mask projection heads."""

    cls_w: Tensor
    cls_b: Tensor
    mask_q_w: Tensor
    mask_q_b: Tensor
    mask_sp_w: Tensor
    mask_sp_b: Tensor

    @classmethod
    def init(cls, rng, cfg: TransformerConfig):
        d, m = cfg.dim, cfg.mask_channels
        return cls(
            cls_w=_proj(rng, d, cfg.n_classes),
            cls_b=Tensor(np.zeros(cfg.n_classes), requires_grad=True),
            mask_q_w=_proj(rng, d, m),
            mask_q_b=Tensor(np.zeros(m), requires_grad=True),
            mask_sp_w=_proj(rng, d, m),
            mask_sp_b=Tensor(np.zeros(m), requires_grad=True),
        )

    def named(self, prefix="heads"):
        return {
            f"{prefix}.cls_w": self.cls_w, f"{prefix}.cls_b": self.cls_b,
            f"{prefix}.mask_q_w": self.mask_q_w, f"{prefix}.mask_q_b": self.mask_q_b,
            f"{prefix}.mask_sp_w": self.mask_sp_w,
            f"{prefix}.mask_sp_b": self.mask_sp_b,
        }


@dataclass
class Model:
    config: TransformerConfig
    encoder: EncoderParams
    blocks: list[Block]
    heads: Heads
    queries: Tensor       # (n_queries, dim) learnable instance queries
    seg_proj_w: Tensor    # placeholder hidden-state -> segmentation query map
    seg_proj_b: Tensor

    @classmethod
    def init(cls, cfg: TransformerConfig, seed: int):
        cfg.validate()
        rng = derived_rng(seed, "model-init")
        blocks = [
            Block.init(rng, cfg, is_moe=(i + 1) in cfg.moe_layers)
            for i in range(cfg.depth)
        ]
        return cls(
            config=cfg,
            encoder=EncoderParams.init(rng, cfg.encoder_hidden, cfg.dim),
            blocks=blocks,
            heads=Heads.init(rng, cfg),
            queries=Tensor(rng.normal(0, 0.5, (cfg.n_queries, cfg.dim)),
                           requires_grad=True),
            seg_proj_w=_proj(rng, cfg.seg_channels, cfg.dim),
            seg_proj_b=Tensor(np.zeros(cfg.dim), requires_grad=True),
        )

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.named("encoder"))
        for i, blk in enumerate(self.blocks, start=1):
            out.update(blk.named(f"block{i}"))
        out.update(self.heads.named())
        out["queries"] = self.queries
        out["seg_proj.w"] = self.seg_proj_w
        out["seg_proj.b"] = self.seg_proj_b
        return out

    def param_groups(self) -> dict[str, list[str]]:
        """Names per trainable unit, for staged freezing."""
        names = list(self.named_params())
        return {
            "encoder": [n for n in names if n.startswith("encoder.")],
            "transformer": [n for n in names if n.startswith("block")],
            "heads": [n for n in names if n.startswith("heads.")],
            "queries": ["queries"],
            "seg_proj": [n for n in names if n.startswith("seg_proj.")],
        }


@dataclass
class ForwardResult:
    tokens: Tensor                   # refined superpoint features (L, D)
    prompt_tokens: Tensor | None     # enhanced prompt features (T, D)
    router_states: list              # [(1-based block index, RouterState)]


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
              wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              heads: int, weights_sink: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention, scale 1/sqrt(dim/heads)."""
    dim = wq.shape[1]
    if q_in.shape[1] != wq.shape[0] or k_in.shape[1] != wk.shape[0]:
        raise ShapeError("attention channel mismatch")
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    q = ad.matmul(q_in, wq)
    k = ad.matmul(k_in, wk)
    v = ad.matmul(v_in, wv)
    out = ad.multihead_attend(q, k, v, heads, weights_sink)
    return ad.matmul(out, wo)


def info_agg(mode: str, sp_feats: Tensor, other: Tensor | None, block: Block,
             heads: int, weights_sink: list | None = None) -> Tensor:
    """One aggregation stage: cross-attention then self-attention.

    R1 returns updated superpoint features (query set = the full sequence);
    R2/R3 return the updated query tokens.
    """
    mode = mode.lower()
    if mode not in ROLES:
        raise ConfigError(f"unknown role {mode!r}")
    if mode == "r1":
        if other is not None:
            raise ConfigError("r1 takes no query operand")
        queries = sp_feats
    else:
        if other is None:
            raise ConfigError(f"{mode} needs query tokens")
        queries = other
    c = block.cross
    a = attention(queries, sp_feats, sp_feats, c.wq[mode], c.wk[mode], c.wv[mode],
                  c.wo, heads, weights_sink)
    x = ad.layer_norm(ad.add(queries, a), *block.ln_cross)
    s = block.selfattn
    a2 = attention(x, x, x, s.wq, s.wk, s.wv, s.wo, heads, weights_sink)
    return ad.layer_norm(ad.add(x, a2), *block.ln_self)


def _ffn_stage(block: Block, layer_idx: int, x: Tensor, cfg: TransformerConfig,
               rng, training: bool) -> tuple[Tensor, RouterState | None]:
    if isinstance(block.ffn, MoELayer):
        y, state = moe_forward(x, block.ffn, cfg.moe, rng, cfg.p_drop, training)
    else:
        y, state = block.ffn.forward(x, cfg.p_drop, training, rng), None
    return ad.layer_norm(ad.add(x, y), *block.ln_ffn), state


def forward(model: Model, sp_feats: Tensor, prompt_feats: Tensor | None = None,
            rng: np.random.Generator | None = None, training: bool = False,
            weights_sink: list | None = None) -> ForwardResult:
    """Run the block stack over the superpoint sequence (plus prompt tokens)."""
    cfg = model.config
    seq = sp_feats
    prt = prompt_feats
    states = []
    for idx, block in enumerate(model.blocks, start=1):
        seq = info_agg("r1", seq, None, block, cfg.heads, weights_sink)
        if prt is not None:
            prt = info_agg("r2", seq, prt, block, cfg.heads, weights_sink)
        seq, state = _ffn_stage(block, idx, seq, cfg, rng, training)
        if state is not None:
            states.append((idx, state))
    return ForwardResult(tokens=seq, prompt_tokens=prt, router_states=states)


def decode_queries(model: Model, query_feats: Tensor, sp_tokens: Tensor,
                   weights_sink: list | None = None) -> Tensor:
    """Pass query tokens through every block's R3 aggregation stage."""
    x = query_feats
    for block in model.blocks:
        x = info_agg("r3", sp_tokens, x, block, model.config.heads, weights_sink)
    return x


def classify(feats: Tensor, heads: Heads) -> Tensor:
    """Single linear classification layer."""
    return ad.add(ad.matmul(feats, heads.cls_w), heads.cls_b)


def mask_decode(query_feats: Tensor, sp_tokens: Tensor, heads: Heads) -> Tensor:
    """Dot-product mask logits: (T, L) from query and superpoint embeddings.

    The query head produces one kernel per query; logits are its inner
    products with the projected superpoint embeddings, and the binary mask
    is logits > 0.
    """
    kernel = ad.add(ad.matmul(query_feats, heads.mask_q_w), heads.mask_q_b)
    sp_emb = ad.add(ad.matmul(sp_tokens, heads.mask_sp_w), heads.mask_sp_b)
    return ad.matmul(kernel, ad.transpose(sp_emb))


def project_seg_query(model: Model, hidden: Tensor) -> Tensor:
    """Placeholder projection from an external hidden state to a seg query."""
    return ad.add(ad.matmul(hidden, model.seg_proj_w), model.seg_proj_b)


def params_fingerprint(params: dict[str, Tensor]) -> str:
    """Order-independent content hash of a named parameter set."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
