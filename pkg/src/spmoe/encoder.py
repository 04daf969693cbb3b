"""Per-voxel MLP feature extractor and the prompt aggregator.

The heavy sparse-convolution backbone is deliberately replaced by a two-layer
MLP over raw voxel tuples: everything downstream (attention, routing, and the
losses) only needs voxel-wise embeddings F_v, and a per-voxel MLP supplies
them at desk scale without bringing in a sparse-conv stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyPromptError, ShapeError
from .scene import PointCloud, PromptSpec, SuperpointPartition, VoxelGrid
from .scene import pool_superpoints, voxelize

THREE_NN_EPS = 1e-8  # meters, added to distances before inversion


@dataclass
class EncoderParams:
    """Two linear layers 6 -> hidden -> out with GELU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, out_dim: int):
        return cls(
            w1=Tensor(rng.normal(0, 0.4, (6, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, out_dim)),
                      requires_grad=True),
            b2=Tensor(np.zeros(out_dim), requires_grad=True),
        )

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def encode(grid: VoxelGrid, params: EncoderParams) -> Tensor:
    """Voxel tuples -> voxel-wise feature embeddings, one row per voxel."""
    if grid.n_voxels < 1:
        raise ShapeError("empty voxel grid")
    x = Tensor(grid.voxels)
    h = ad.gelu(ad.add(ad.matmul(x, params.w1), params.b1))
    return ad.add(ad.matmul(h, params.w2), params.b2)


def voxel_superpoint_partition(
    grid: VoxelGrid, point_partition: SuperpointPartition
) -> SuperpointPartition:
    """Map superpoint labels from points onto voxels by majority vote.

    Ties go to the lower label id. The returned partition is defined over
    voxel rows so it can drive pooling of encoded voxel features.
    """
    n_sp = point_partition.n_superpoints
    votes = np.zeros((grid.n_voxels, n_sp), dtype=np.int64)
    np.add.at(votes, (grid.point_to_voxel, point_partition.labels), 1)
    labels = votes.argmax(axis=1)  # argmax takes the first (lowest) on ties
    return SuperpointPartition.from_labels(grid.voxels[:, :3], labels)


def superpoint_features(
    cloud: PointCloud,
    voxel_size: float,
    partition: SuperpointPartition,
    params: EncoderParams,
) -> Tensor:
    """encode(voxelize(cloud)) pooled per superpoint: the L x C feature rows."""
    grid = voxelize(cloud, voxel_size)
    feats = encode(grid, params)
    vox_part = voxel_superpoint_partition(grid, partition)
    if vox_part.n_superpoints != partition.n_superpoints:
        # a superpoint lost every voxel in the majority vote
        raise ShapeError(
            f"voxel map covers {vox_part.n_superpoints} of "
            f"{partition.n_superpoints} superpoints"
        )
    return pool_superpoints(feats, vox_part)


def aggregate_prompt(
    prompt: PromptSpec, partition: SuperpointPartition, sp_feats: Tensor
) -> Tensor:
    """Sample one prompt token from the superpoint features.

    Clicks use inverse-distance weighting over the three nearest superpoint
    centroids (all of them when fewer than three exist); boxes and masks
    average the features of the superpoints they select.
    """
    L = partition.n_superpoints
    if sp_feats.shape[0] != L:
        raise ShapeError(f"features rows {sp_feats.shape[0]} != superpoints {L}")

    if prompt.kind == "click":
        d = np.linalg.norm(partition.centroids - prompt.click[None, :], axis=1)
        k = min(3, L)
        nn = np.argsort(d, kind="stable")[:k]
        w = 1.0 / (d[nn] + THREE_NN_EPS)
        w = w / w.sum()
        rows = ad.gather_rows(sp_feats, nn)
        return ad.matmul(Tensor(w[None, :]), rows)

    if prompt.kind == "box":
        lo, hi = prompt.box
        inside = np.flatnonzero(
            (partition.centroids >= lo).all(axis=1)
            & (partition.centroids <= hi).all(axis=1)
        )
        if inside.size == 0:
            raise EmptyPromptError("box contains no superpoint centroid")
        sel = inside
    else:  # mask
        sel = np.flatnonzero(prompt.mask)
        if sel.size == 0:
            raise EmptyPromptError("prompt mask selects no superpoint")

    w = np.full((1, sel.size), 1.0 / sel.size)
    return ad.matmul(Tensor(w), ad.gather_rows(sp_feats, sel))
