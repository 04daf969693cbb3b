"""Point-cloud data model, voxelization, superpoint pooling, synthetic scenes.

Synthetic scenes stand in for real indoor scans: axis-aligned cuboid objects
on a floor plane against one wall, with the generator's primitive ids acting
as the precomputed superpoint partition (optionally split on a spatial grid
to raise the superpoint count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .autodiff import Tensor, make_op
from .errors import ConfigError, DataFormatError, InvariantError


@dataclass(frozen=True)
class PointCloud:
    """N points as rows of (x, y, z in meters, r, g, b in [0,1])."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 1:
            raise InvariantError(f"point cloud must be (N>=1, 6), got {pts.shape}")
        if not np.isfinite(pts[:, :3]).all():
            raise InvariantError("non-finite coordinates")
        if pts[:, 3:].min() < 0.0 or pts[:, 3:].max() > 1.0:
            raise InvariantError("colors must lie in [0, 1]")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied cells with per-cell averaged features and a point->cell map."""

    voxel_size: float
    voxels: np.ndarray          # (M, 6) means of member points
    point_to_voxel: np.ndarray  # (N,) indices into [0, M)

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class SuperpointPartition:
    """Labels over points (or voxels) plus per-label coordinate centroids."""

    labels: np.ndarray     # (n,) ints in [0, L)
    n_superpoints: int
    centroids: np.ndarray  # (L, 3)

    @classmethod
    def from_labels(cls, coords: np.ndarray, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != coords.shape[0]:
            raise InvariantError("labels must be one per row")
        if labels.size == 0 or labels.min() < 0:
            raise InvariantError("labels must be nonnegative and nonempty")
        n_sp = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=n_sp)
        if (counts == 0).any():
            missing = int(np.flatnonzero(counts == 0)[0])
            raise InvariantError(f"superpoint {missing} has no members")
        cent = np.zeros((n_sp, 3))
        np.add.at(cent, labels, coords[:, :3])
        cent /= counts[:, None]
        return cls(labels=labels, n_superpoints=n_sp, centroids=cent)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_superpoints)


@dataclass(frozen=True)
class PromptSpec:
    """One visual prompt: a point click, an axis-aligned box, or a mask."""

    kind: str                       # click | box | mask
    click: np.ndarray | None = None  # (3,)
    box: np.ndarray | None = None    # (2, 3) min and max corners
    mask: np.ndarray | None = None   # (L,) binary over superpoints

    def __post_init__(self):
        populated = [v is not None for v in (self.click, self.box, self.mask)]
        if sum(populated) != 1:
            raise InvariantError("exactly one prompt variant must be populated")
        expected = {"click": self.click, "box": self.box, "mask": self.mask}
        if self.kind not in expected or expected[self.kind] is None:
            raise InvariantError(f"prompt kind {self.kind!r} does not match payload")
        if self.box is not None and not (self.box[0] <= self.box[1]).all():
            raise InvariantError("box min corner must not exceed max corner")

    @classmethod
    def from_click(cls, xyz):
        return cls(kind="click", click=np.asarray(xyz, dtype=np.float64))

    @classmethod
    def from_box(cls, lo, hi):
        return cls(kind="box", box=np.stack([np.asarray(lo, dtype=np.float64),
                                             np.asarray(hi, dtype=np.float64)]))

    @classmethod
    def from_mask(cls, mask):
        return cls(kind="mask", mask=np.asarray(mask, dtype=np.int64))


@dataclass
class SceneSample:
    """A full synthetic scene with labels, instances and optional extras."""

    cloud: PointCloud
    partition: SuperpointPartition
    sp_class: np.ndarray               # (L,) class ids
    gt_instances: list[np.ndarray]     # binary (L,) masks
    prompt: PromptSpec | None = None
    teacher_feats: np.ndarray | None = None  # (L, C)

    def validate(self) -> None:
        L = self.partition.n_superpoints
        if self.sp_class.shape != (L,):
            raise InvariantError(f"sp_class must be ({L},), got {self.sp_class.shape}")
        if self.sp_class.min() < 0:
            raise InvariantError("negative class id")
        for i, m in enumerate(self.gt_instances):
            if m.shape != (L,) or set(np.unique(m)) - {0, 1}:
                raise InvariantError(f"instance mask {i} is not binary length {L}")
            if m.sum() < 1:
                raise InvariantError(f"instance mask {i} has no positives")
        if self.teacher_feats is not None and self.teacher_feats.shape[0] != L:
            raise InvariantError("teacher features must have one row per superpoint")
        if self.prompt is not None and self.prompt.mask is not None:
            if self.prompt.mask.shape != (L,):
                raise InvariantError("prompt mask length mismatch")


# -- voxelization ----------------------------------------------------------


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Discretize into regular cells of the given edge length (default 2 cm).

    Cell index is floor(coord / voxel_size) per axis, so boundary points go
    to the lower-index cell; each occupied cell stores the mean feature tuple
    of its member points.
    """
    if voxel_size <= 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    cells = np.floor(cloud.points[:, :3] / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(
        cells, axis=0, return_inverse=True, return_counts=True
    )
    m = counts.shape[0]
    sums = np.zeros((m, 6))
    np.add.at(sums, inverse, cloud.points)
    return VoxelGrid(
        voxel_size=voxel_size,
        voxels=sums / counts[:, None],
        point_to_voxel=inverse.astype(np.int64),
    )


def pool_superpoints(feats: Tensor, partition: SuperpointPartition) -> Tensor:
    """Average feature rows per superpoint label; differentiable.

    The gradient of a pooled row splits evenly (1/|members|) back onto its
    member rows.
    """
    labels = partition.labels
    if feats.shape[0] != labels.shape[0]:
        raise InvariantError(
            f"partition covers {labels.shape[0]} rows, features have {feats.shape[0]}"
        )
    n_sp = partition.n_superpoints
    counts = np.bincount(labels, minlength=n_sp).astype(np.float64)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise InvariantError(f"superpoint {missing} has no members")
    pooled = np.zeros((n_sp, feats.shape[1]), dtype=feats.data.dtype)
    np.add.at(pooled, labels, feats.data)
    pooled /= counts[:, None]

    def backward(g, sink):
        sink(feats, g[labels] / counts[labels, None])

    return make_op(pooled, (feats,), backward)


# -- synthetic scene generation ---------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    """Generator knobs. Classes 0/1 are floor/wall; objects draw from the rest."""

    n_points: int = 2000
    n_objects: int = 3
    n_classes: int = 6
    noise: float = 0.003
    room: float = 4.0
    wall_height: float = 2.5
    split: int = 1              # per-primitive spatial split factor
    teacher_dim: int = 0        # 0 disables teacher features
    teacher_noise: float = 0.05
    with_prompt: bool = False

    def validate(self) -> None:
        if self.n_points < 50:
            raise ConfigError("need at least 50 points")
        if self.n_objects < 1:
            raise ConfigError("need at least one object")
        if self.n_classes < 3:
            raise ConfigError("need >= 3 classes (floor, wall, objects)")
        if self.noise < 0 or self.teacher_noise < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.split < 1:
            raise ConfigError("split factor must be >= 1")
        if self.teacher_dim and self.teacher_dim < self.n_classes:
            raise ConfigError("teacher_dim must be >= n_classes for one-hot targets")


def _class_color(cls_id: int, n_classes: int) -> np.ndarray:
    # evenly spaced hues, fixed saturation/value; deterministic per class
    h = (cls_id / max(n_classes, 1)) * 6.0
    x = 1.0 - abs(h % 2.0 - 1.0)
    bands = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    r, g, b = bands[min(int(h), 5)]
    return 0.25 + 0.6 * np.array([r, g, b])


def _sample_cuboid_surface(rng, lo, hi, n):
    dims = hi - lo
    areas = np.array([
        dims[1] * dims[2], dims[1] * dims[2],
        dims[0] * dims[2], dims[0] * dims[2],
        dims[0] * dims[1], dims[0] * dims[1],
    ])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * dims
    axis = faces // 2
    side = faces % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSample:
    """Build a deterministic synthetic scene from the seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    # budget: 40% of points on floor+wall, the rest split across objects
    n_bg = max(int(0.4 * cfg.n_points), 20)
    n_floor = n_bg // 2
    n_wall = n_bg - n_floor
    n_obj_total = cfg.n_points - n_bg
    per_obj = np.full(cfg.n_objects, n_obj_total // cfg.n_objects)
    per_obj[: n_obj_total % cfg.n_objects] += 1

    chunks = []       # (xyz, class_id, primitive_id)
    prim = 0

    floor = np.zeros((n_floor, 3))
    floor[:, 0] = rng.random(n_floor) * cfg.room
    floor[:, 1] = rng.random(n_floor) * cfg.room
    chunks.append((floor, 0, prim))
    prim += 1

    wall = np.zeros((n_wall, 3))
    wall[:, 1] = rng.random(n_wall) * cfg.room
    wall[:, 2] = rng.random(n_wall) * cfg.wall_height
    chunks.append((wall, 1, prim))
    prim += 1

    boxes = []
    for k in range(cfg.n_objects):
        size = 0.3 + rng.random(3) * 0.5
        center = 0.6 + rng.random(2) * (cfg.room - 1.2)
        lo = np.array([center[0] - size[0] / 2, center[1] - size[1] / 2, 0.0])
        hi = lo + size
        pts = _sample_cuboid_surface(rng, lo, hi, int(per_obj[k]))
        cls_id = int(rng.integers(2, cfg.n_classes))
        chunks.append((pts, cls_id, prim))
        boxes.append((lo, hi))
        prim += 1

    xyz = np.concatenate([c[0] for c in chunks])
    point_cls = np.concatenate(
        [np.full(len(c[0]), c[1], dtype=np.int64) for c in chunks]
    )
    prim_ids = np.concatenate(
        [np.full(len(c[0]), c[2], dtype=np.int64) for c in chunks]
    )
    if cfg.noise > 0:
        xyz = xyz + rng.normal(0.0, cfg.noise, xyz.shape)

    colors = np.stack([_class_color(c, cfg.n_classes) for c in point_cls])
    colors = np.clip(colors + rng.normal(0.0, 0.03, colors.shape), 0.0, 1.0)
    cloud = PointCloud(np.concatenate([xyz, colors], axis=1))

    # superpoints: primitive id, optionally split on a per-primitive grid
    if cfg.split > 1:
        sub = np.zeros(len(xyz), dtype=np.int64)
        for p in range(prim):
            sel = prim_ids == p
            lo = xyz[sel].min(axis=0)
            span = np.maximum(xyz[sel].max(axis=0) - lo, 1e-9)
            cell = np.minimum(
                (cfg.split * (xyz[sel] - lo) / span).astype(np.int64), cfg.split - 1
            )
            sub[sel] = cell[:, 0] * cfg.split + cell[:, 1]
        raw = prim_ids * cfg.split * cfg.split + sub
        _, labels = np.unique(raw, return_inverse=True)
    else:
        labels = prim_ids
    partition = SuperpointPartition.from_labels(xyz, labels.astype(np.int64))
    L = partition.n_superpoints

    # per-superpoint class by majority vote over member points
    sp_class = np.zeros(L, dtype=np.int64)
    for s in range(L):
        member_cls = point_cls[partition.labels == s]
        sp_class[s] = np.bincount(member_cls).argmax()

    # instance masks: one per object primitive
    gt_instances = []
    for p in range(2, prim):
        sp_of_prim = np.unique(partition.labels[prim_ids == p])
        mask = np.zeros(L, dtype=np.int64)
        mask[sp_of_prim] = 1
        gt_instances.append(mask)

    teacher = None
    if cfg.teacher_dim:
        teacher = np.zeros((L, cfg.teacher_dim))
        teacher[np.arange(L), sp_class] = 1.0
        teacher += rng.normal(0.0, cfg.teacher_noise, teacher.shape)

    prompt = None
    if cfg.with_prompt:
        target = int(rng.integers(0, cfg.n_objects))
        kind = ("click", "box", "mask")[seed % 3]
        if kind == "click":
            lo, hi = boxes[target]
            prompt = PromptSpec.from_click((lo + hi) / 2)
        elif kind == "box":
            lo, hi = boxes[target]
            prompt = PromptSpec.from_box(lo - 0.05, hi + 0.05)
        else:
            prompt = PromptSpec.from_mask(gt_instances[target])

    sample = SceneSample(
        cloud=cloud,
        partition=partition,
        sp_class=sp_class,
        gt_instances=gt_instances,
        prompt=prompt,
        teacher_feats=teacher,
    )
    sample.validate()
    return sample


# -- on-disk format ----------------------------------------------------------


def write_scene(sample: SceneSample, path) -> None:
    box = container.Container("scene")
    box.meta["n_superpoints"] = str(sample.partition.n_superpoints)
    box.add("points", sample.cloud.points)
    box.add("sp_labels", sample.partition.labels[:, None])
    box.add("sp_class", sample.sp_class[:, None])
    if sample.gt_instances:
        box.add("gt_instances", np.stack(sample.gt_instances))
    if sample.teacher_feats is not None:
        box.add("teacher_feats", sample.teacher_feats)
    if sample.prompt is not None:
        box.meta["prompt_kind"] = sample.prompt.kind
        if sample.prompt.click is not None:
            box.add("prompt_data", sample.prompt.click[None, :])
        elif sample.prompt.box is not None:
            box.add("prompt_data", sample.prompt.box)
        else:
            box.add("prompt_data", sample.prompt.mask[None, :])
    box.write(path)


def read_scene(path) -> SceneSample:
    box = container.read(path, expect_kind="scene")
    try:
        points = box.sections["points"]
        labels = box.sections["sp_labels"][:, 0]
        sp_class = box.sections["sp_class"][:, 0]
    except KeyError as exc:
        raise DataFormatError(f"scene file missing section {exc}") from exc
    cloud = PointCloud(points)
    partition = SuperpointPartition.from_labels(points[:, :3], labels)
    if partition.n_superpoints != int(box.meta.get("n_superpoints", -1)):
        raise InvariantError("declared superpoint count does not match labels")
    gt = [m for m in box.sections.get("gt_instances", np.zeros((0, 0), np.int64))]
    teacher = box.sections.get("teacher_feats")
    prompt = None
    kind = box.meta.get("prompt_kind")
    if kind is not None:
        data = box.sections.get("prompt_data")
        if data is None:
            raise DataFormatError("prompt_kind present but prompt_data missing")
        if kind == "click":
            prompt = PromptSpec.from_click(data[0])
        elif kind == "box":
            prompt = PromptSpec.from_box(data[0], data[1])
        elif kind == "mask":
            prompt = PromptSpec.from_mask(data[0].astype(np.int64))
        else:
            raise DataFormatError(f"unknown prompt kind {kind!r}")
    sample = SceneSample(
        cloud=cloud,
        partition=partition,
        sp_class=sp_class.astype(np.int64),
        gt_instances=[m.astype(np.int64) for m in gt],
        prompt=prompt,
        teacher_feats=teacher,
    )
    sample.validate()
    return sample


def scenes_equal(a: SceneSample, b: SceneSample) -> bool:
    """Field-by-field exact equality; used by round-trip tests."""
    if not np.array_equal(a.cloud.points, b.cloud.points):
        return False
    if not np.array_equal(a.partition.labels, b.partition.labels):
        return False
    if not np.array_equal(a.sp_class, b.sp_class):
        return False
    if len(a.gt_instances) != len(b.gt_instances):
        return False
    for ma, mb in zip(a.gt_instances, b.gt_instances):
        if not np.array_equal(ma, mb):
            return False
    if (a.teacher_feats is None) != (b.teacher_feats is None):
        return False
    if a.teacher_feats is not None and not np.array_equal(
        a.teacher_feats, b.teacher_feats
    ):
        return False
    if (a.prompt is None) != (b.prompt is None):
        return False
    if a.prompt is not None:
        if a.prompt.kind != b.prompt.kind:
            return False
        for fa, fb in ((a.prompt.click, b.prompt.click),
                       (a.prompt.box, b.prompt.box),
                       (a.prompt.mask, b.prompt.mask)):
            if (fa is None) != (fb is None):
                return False
            if fa is not None and not np.array_equal(fa, fb):
                return False
    return True


__all__ = [
    "PointCloud", "VoxelGrid", "SuperpointPartition", "PromptSpec",
    "SceneSample", "SceneConfig", "voxelize", "pool_superpoints",
    "generate_scene", "write_scene", "read_scene", "scenes_equal",
]
