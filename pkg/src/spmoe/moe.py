"""Sparse mixture-of-experts: gating, top-K routing, dispatch, regularizers.

Routing follows the sparse-gating recipe exactly as written: routing weights
are the raw softmax of the gating logits, the top-K entries are kept without
renormalization, and a token's output is the kept-weight-scaled sum of its
selected experts. Ties at equal logits go to the lower expert index.

A single-expert layer degenerates to a plain FFN: no gate is allocated, its
logits are defined as zeros, and the (constant-1) routing weight is never
multiplied in, so output and FLOPs match the dense block exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

SECOND_EXPERT_POLICIES = ("none", "all", "threshold", "random")


@dataclass
class MoEConfig:
    n_experts: int = 4
    top_k: int = 1
    z_loss_weight: float = 1e-4
    balance_weight: float = 0.0
    second_expert_policy: str = "none"
    second_expert_threshold: float = 0.2

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k must be in [1, {self.n_experts}], got {self.top_k}"
            )
        if self.z_loss_weight < 0 or self.balance_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.second_expert_policy not in SECOND_EXPERT_POLICIES:
            raise ConfigError(
                f"unknown second-expert policy {self.second_expert_policy!r}"
            )
        if self.second_expert_policy != "none" and self.top_k != 1:
            raise ConfigError("second-expert policies extend top-1 routing only")


@dataclass
class Expert:
    """Two-layer MLP with LayerNorm on the input and GELU between layers."""

    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, hidden: int):
        return cls(
            ln_g=Tensor(np.ones(dim), requires_grad=True),
            ln_b=Tensor(np.zeros(dim), requires_grad=True),
            w1=Tensor(rng.normal(0, 1.0 / np.sqrt(dim), (dim, hidden)),
                      requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, dim)),
                      requires_grad=True),
            b2=Tensor(np.zeros(dim), requires_grad=True),
        )

    def forward(self, x: Tensor, p_drop: float = 0.0, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        # rowwise matmuls keep each token's result independent of the batch
        # composition, which makes sparse dispatch bitwise-reproducible
        h = ad.layer_norm(x, self.ln_g, self.ln_b)
        h = ad.gelu(ad.add(ad.matmul(h, self.w1, rowwise=True), self.b1))
        if p_drop > 0.0 and training:
            h = ad.dropout(h, p_drop, training, rng)
        return ad.add(ad.matmul(h, self.w2, rowwise=True), self.b2)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.ln_g": self.ln_g, f"{prefix}.ln_b": self.ln_b,
            f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
        }


@dataclass
class MoELayer:
    """Gate weights plus the expert bank for one transformer block."""

    experts: list[Expert]
    gate_w: Tensor | None  # (D, E); None when there is a single expert

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, hidden: int, n_experts: int):
        experts = [Expert.init(rng, dim, hidden) for _ in range(n_experts)]
        gate = None
        if n_experts > 1:
            gate = Tensor(rng.normal(0, 0.02, (dim, n_experts)), requires_grad=True)
        return cls(experts=experts, gate_w=gate)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        if self.gate_w is not None:
            out[f"{prefix}.gate_w"] = self.gate_w
        for e, expert in enumerate(self.experts):
            out.update(expert.named(f"{prefix}.expert{e}"))
        return out


@dataclass
class RouterState:
    """Per-token routing record for one MoE layer.

    ``selected`` holds expert indices by rank with -1 for slots a policy
    declined to activate; ``mask`` is the 0/1 selection matrix; kept weights
    equal the corresponding softmax probabilities (no renormalization).
    """

    logits: Tensor               # (L, E)
    probs: Tensor                # (L, E) softmax rows
    ranking: np.ndarray          # (L, E) experts by descending prob
    selected: np.ndarray         # (L, K) chosen experts, -1 = inactive
    mask: np.ndarray             # (L, E) 0/1
    load: np.ndarray = field(default=None)  # (E,) token counts

    def __post_init__(self):
        if self.load is None:
            flat = self.selected[self.selected >= 0]
            self.load = np.bincount(flat, minlength=self.probs.shape[1])

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]

    def masked_weights(self) -> Tensor:
        return ad.mul(self.probs, self.mask.astype(np.float64))


def gate(x: Tensor, gate_w: Tensor) -> Tensor:
    """Gating scores: plain linear map of the token features."""
    if x.shape[1] != gate_w.shape[0]:
        raise ShapeError(f"gate shapes {x.shape} x {gate_w.shape}")
    return ad.matmul(x, gate_w)


def route(logits: Tensor, top_k: int) -> RouterState:
    """Softmax, then keep the K largest weights per row (rest zero)."""
    n_experts = logits.shape[1]
    if not 1 <= top_k <= n_experts:
        raise ConfigError(f"top_k must be in [1, {n_experts}], got {top_k}")
    probs = ad.softmax_rows(logits)
    # stable sort on the negated probs: equal entries keep index order,
    # so ties resolve to the lowest expert index
    ranking = np.argsort(-probs.data, axis=1, kind="stable")
    selected = ranking[:, :top_k]
    mask = np.zeros_like(probs.data, dtype=np.int64)
    np.put_along_axis(mask, selected, 1, axis=1)
    return RouterState(
        logits=logits, probs=probs, ranking=ranking, selected=selected, mask=mask
    )


def second_expert(state: RouterState, policy: str, rng: np.random.Generator | None,
                  threshold: float = 0.2) -> RouterState:
    """Optionally activate the rank-2 expert on top of a top-1 routing."""
    if policy == "none":
        return state
    if policy not in SECOND_EXPERT_POLICIES:
        raise ConfigError(f"unknown second-expert policy {policy!r}")
    if state.selected.shape[1] != 1:
        raise ConfigError("second-expert policies require a top-1 base routing")
    L = state.selected.shape[0]
    second = state.ranking[:, 1]
    p2 = state.probs.data[np.arange(L), second]
    if policy == "all":
        active = np.ones(L, dtype=bool)
    elif policy == "threshold":
        active = p2 > threshold
    else:
        if rng is None:
            raise ConfigError("random policy needs a seeded generator")
        active = rng.random(L) < p2
    selected = np.concatenate(
        [state.selected, np.where(active, second, -1)[:, None]], axis=1
    )
    mask = state.mask.copy()
    mask[active, second[active]] = 1
    return RouterState(
        logits=state.logits, probs=state.probs, ranking=state.ranking,
        selected=selected, mask=mask,
    )


def dispatch(x: Tensor, experts: list[Expert], state: RouterState,
             p_drop: float = 0.0, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Gather each expert's tokens, evaluate, scale and place back in order."""
    L = x.shape[0]
    out = None
    for e, expert in enumerate(experts):
        rows = np.flatnonzero(state.mask[:, e])
        if rows.size == 0:
            continue
        xe = ad.gather_rows(x, rows)
        ye = expert.forward(xe, p_drop, training, rng)
        we = ad.take_at(state.probs, rows, np.full(rows.size, e))
        term = ad.scatter_rows(ad.scale_rows(ye, we), rows, L)
        out = term if out is None else ad.add(out, term)
    if out is None:
        raise ShapeError("routing selected no experts")
    return out


def moe_forward(x: Tensor, layer: MoELayer, cfg: MoEConfig,
                rng: np.random.Generator | None = None, p_drop: float = 0.0,
                training: bool = False) -> tuple[Tensor, RouterState]:
    """One MoE feed-forward stage (without the block's residual/norm wrap)."""
    if layer.n_experts != cfg.n_experts:
        raise ConfigError(
            f"layer has {layer.n_experts} experts, config says {cfg.n_experts}"
        )
    L = x.shape[0]
    if cfg.n_experts == 1:
        y = layer.experts[0].forward(x, p_drop, training, rng)
        ones = np.ones((L, 1))
        state = RouterState(
            logits=Tensor(np.zeros((L, 1))), probs=Tensor(ones),
            ranking=np.zeros((L, 1), dtype=np.int64),
            selected=np.zeros((L, 1), dtype=np.int64),
            mask=np.ones((L, 1), dtype=np.int64),
        )
        return y, state
    logits = gate(x, layer.gate_w)
    state = route(logits, cfg.top_k)
    if cfg.top_k == 1 and cfg.second_expert_policy != "none":
        state = second_expert(
            state, cfg.second_expert_policy, rng, cfg.second_expert_threshold
        )
    y = dispatch(x, layer.experts, state, p_drop, training, rng)
    return y, state


# -- regularizers -------------------------------------------------------------


def z_loss(logits: Tensor) -> Tensor:
    """Mean squared log-sum-exp of the gating logits (stable lse)."""
    lse = ad.logsumexp_rows(logits)
    return ad.mul(lse, lse).mean()


def balance_loss(state: RouterState) -> Tensor:
    """Importance-times-load product: E * sum_e f_e * P_e.

    f_e is the fraction of tokens whose top-1 expert is e (a hard count);
    P_e is the mean routing probability of e. Gradients flow through P only.
    The value is 1 exactly under perfectly uniform f and P.
    """
    L, E = state.probs.shape
    f = np.bincount(state.top1, minlength=E) / L
    mean_p = ad.matmul(Tensor(np.full((1, L), 1.0 / L)), state.probs)  # (1, E)
    return ad.mul(mean_p, f[None, :]).sum() * float(E)


# -- utilization statistics ----------------------------------------------------


@dataclass
class ActivationMap:
    """Dominant expert per superpoint per MoE layer, plus load histograms."""

    layer_indices: list[int]     # 1-based block indices
    dominant: np.ndarray         # (n_layers, L)
    load: np.ndarray             # (n_layers, E)

    def to_container(self) -> container.Container:
        box = container.Container("activations")
        box.meta["layers"] = ",".join(str(i) for i in self.layer_indices)
        box.add("dominant", self.dominant.astype(np.int64))
        box.add("load", self.load.astype(np.int64))
        return box

    @classmethod
    def from_container(cls, box: container.Container):
        layers = [int(v) for v in box.meta["layers"].split(",")]
        return cls(
            layer_indices=layers,
            dominant=box.sections["dominant"],
            load=box.sections["load"],
        )


def expert_stats(states: list[RouterState], layer_indices: list[int],
                 n_experts: int) -> ActivationMap:
    """Summarize routing decisions of one forward pass."""
    dominant = np.stack([s.top1 for s in states])
    load = np.stack([
        np.pad(s.load, (0, n_experts - s.load.shape[0])) for s in states
    ])
    return ActivationMap(
        layer_indices=list(layer_indices), dominant=dominant, load=load
    )


def flops_per_token(dim: int, ffn_hidden: int, n_experts: int, top_k: int = 1) -> int:
    """Analytic forward multiply-add FLOPs of one MoE stage for one token.

    Each selected expert costs two matmuls (2*D*F + 2*F*D); the gate costs
    2*D*E and vanishes for a single expert, where it is not computed at all.
    """
    expert_cost = top_k * 4 * dim * ffn_hidden
    gate_cost = 2 * dim * n_experts if n_experts > 1 else 0
    return expert_cost + gate_cost
