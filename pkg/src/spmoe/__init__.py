"""Superpoint transformer with sparse mixture-of-experts routing.

A desk-scale, dependency-light pipeline: point clouds are voxelized and
pooled into superpoint tokens, refined by a transformer whose feed-forward
stages are partly replaced with top-K-routed expert banks, and decoded into
instance or referring segmentation masks. Everything runs on a small
numpy-backed reverse-mode tape so gradients, routing invariants and FLOP
counts can be audited directly.
"""

from .autodiff import LEDGER, FlopLedger, Tensor, derived_rng
from .encoder import EncoderParams, aggregate_prompt, encode, superpoint_features
from .losses import LossWeights, cosine_align, iou_superpoint_masks, miou
from .model import (
    ForwardResult,
    Model,
    TransformerConfig,
    attention,
    classify,
    decode_queries,
    forward,
    info_agg,
    mask_decode,
)
from .moe import (
    ActivationMap,
    Expert,
    MoEConfig,
    MoELayer,
    RouterState,
    balance_loss,
    expert_stats,
    flops_per_token,
    gate,
    moe_forward,
    route,
    second_expert,
    z_loss,
)
from .scene import (
    PointCloud,
    PromptSpec,
    SceneConfig,
    SceneSample,
    SuperpointPartition,
    VoxelGrid,
    generate_scene,
    pool_superpoints,
    read_scene,
    voxelize,
    write_scene,
)
from .training import (
    AdamW,
    TrainConfig,
    TrainLog,
    gradcheck,
    load_checkpoint,
    make_referring_set,
    save_checkpoint,
    stage1_align,
    stage2_pretrain,
    stage3_mask_finetune,
)

__version__ = "0.1.0"
