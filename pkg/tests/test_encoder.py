"""Voxel MLP encoder and prompt aggregator tests."""

import numpy as np
import pytest

from spmoe import autodiff as ad
from spmoe.autodiff import Tensor
from spmoe.encoder import (
    EncoderParams,
    aggregate_prompt,
    encode,
    superpoint_features,
    voxel_superpoint_partition,
)
from spmoe.errors import EmptyPromptError
from spmoe.scene import (
    PointCloud,
    PromptSpec,
    SceneConfig,
    SuperpointPartition,
    generate_scene,
    pool_superpoints,
    voxelize,
)

from test_autodiff import check_grads


def tiny_params(seed=0, hidden=5, out=4):
    return EncoderParams.init(np.random.default_rng(seed), hidden, out)


def make_cloud(xyz, color=0.5):
    return PointCloud(np.concatenate([xyz, np.full((len(xyz), 3), color)], axis=1))


def test_encode_zero_weights_gives_bias_image():
    p = tiny_params()
    p.w1.data[:] = 0.0
    p.b1.data[:] = 0.3
    p.b2.data[:] = -1.0
    grid = voxelize(make_cloud(np.random.default_rng(0).random((20, 3))), 0.05)
    out = encode(grid, p).data
    # first layer is constant, so every row is the second layer's image of
    # gelu(b1)
    gelu_b1 = 0.5 * 0.3 * (1 + np.tanh(0.7978845608028654
                                       * (0.3 + 0.044715 * 0.3**3)))
    expect = np.full(5, gelu_b1) @ p.w2.data - 1.0
    assert np.allclose(out, expect[None, :], atol=1e-12)
    assert np.array_equal(out[0], out[-1])


def test_encode_identical_voxels_identical_rows():
    xyz = np.array([[0.1, 0.1, 0.1], [1.1, 1.1, 1.1]])
    grid = voxelize(make_cloud(xyz), 0.05)
    # both voxels hold a single identical-feature point apart from coords;
    # force identical voxel tuples instead
    grid = type(grid)(grid.voxel_size, np.tile(grid.voxels[0], (2, 1)),
                      grid.point_to_voxel)
    out = encode(grid, tiny_params()).data
    assert np.array_equal(out[0], out[1])


def test_encode_gradients_match_finite_differences():
    p = tiny_params(3)
    grid = voxelize(make_cloud(np.random.default_rng(1).random((15, 3))), 0.1)
    params = [p.w1, p.b1, p.w2, p.b2]
    c = np.random.default_rng(2).standard_normal((grid.n_voxels, 4))
    check_grads(lambda: ad.mul(encode(grid, p), c).sum(), params, tol=1e-4)


def test_superpoint_features_single_superpoint():
    xyz = np.random.default_rng(2).random((30, 3))
    part = SuperpointPartition.from_labels(xyz, np.zeros(30, dtype=np.int64))
    p = tiny_params()
    feats = superpoint_features(make_cloud(xyz), 0.05, part, p)
    grid = voxelize(make_cloud(xyz), 0.05)
    expect = encode(grid, p).data.mean(axis=0)
    assert np.max(np.abs(feats.data[0] - expect)) < 1e-12


def test_superpoint_features_composition_oracle():
    cfg = SceneConfig(n_points=400, n_objects=2)
    s = generate_scene(4, cfg)
    p = tiny_params(5)
    got = superpoint_features(s.cloud, 0.05, s.partition, p).data
    grid = voxelize(s.cloud, 0.05)
    vox_part = voxel_superpoint_partition(grid, s.partition)
    expect = pool_superpoints(encode(grid, p), vox_part).data
    assert np.array_equal(got, expect)


def test_voxel_partition_majority_tie_lowest_label():
    xyz = np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0]])
    grid = voxelize(make_cloud(xyz), 0.02)
    part = SuperpointPartition.from_labels(xyz, np.array([1, 0]))
    vp = voxel_superpoint_partition(grid, part)
    assert vp.labels[0] == 0


def click_fixture(seed=0, L=10, C=6):
    rng = np.random.default_rng(seed)
    cent = rng.random((L, 3)) * 3
    part = SuperpointPartition.from_labels(cent, np.arange(L))
    feats = Tensor(rng.standard_normal((L, C)))
    return part, feats


def test_click_on_centroid_returns_that_feature():
    part, feats = click_fixture()
    prompt = PromptSpec.from_click(part.centroids[4])
    out = aggregate_prompt(prompt, part, feats)
    assert out.shape == (1, 6)
    assert np.max(np.abs(out.data[0] - feats.data[4])) < 1e-6


def test_mask_all_ones_is_mean():
    part, feats = click_fixture(1)
    prompt = PromptSpec.from_mask(np.ones(10, dtype=np.int64))
    out = aggregate_prompt(prompt, part, feats)
    assert np.max(np.abs(out.data[0] - feats.data.mean(axis=0))) < 1e-12


def test_click_knn_oracle():
    part, feats = click_fixture(7)
    click = np.array([1.0, 1.5, 0.5])
    out = aggregate_prompt(PromptSpec.from_click(click), part, feats).data[0]
    d = np.sqrt(((part.centroids - click) ** 2).sum(axis=1))
    nn = np.argsort(d)[:3]
    w = 1.0 / (d[nn] + 1e-8)
    w /= w.sum()
    expect = (w[:, None] * feats.data[nn]).sum(axis=0)
    assert np.max(np.abs(out - expect)) < 1e-10


def test_threenn_weights_sum_to_one_and_small_L():
    rng = np.random.default_rng(9)
    for L in (1, 2, 3, 8):
        cent = rng.random((L, 3))
        part = SuperpointPartition.from_labels(cent, np.arange(L))
        feats = Tensor(np.eye(L))  # rows are one-hot: output = weights
        out = aggregate_prompt(
            PromptSpec.from_click(rng.random(3)), part, feats
        ).data[0]
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.count_nonzero(out) == min(3, L)
        assert (out >= 0).all()


def test_prompt_permutation_equivariance():
    part, feats = click_fixture(11)
    perm = np.random.default_rng(0).permutation(10)
    part2 = SuperpointPartition.from_labels(part.centroids[perm], np.arange(10))
    feats2 = Tensor(feats.data[perm])
    for prompt in (
        PromptSpec.from_click([0.5, 0.5, 0.5]),
        PromptSpec.from_box([0.0, 0.0, 0.0], [3.0, 3.0, 3.0]),
    ):
        a = aggregate_prompt(prompt, part, feats).data
        b = aggregate_prompt(prompt, part2, feats2).data
        assert np.max(np.abs(a - b)) < 1e-12
    mask = np.zeros(10, dtype=np.int64)
    mask[[2, 5, 7]] = 1
    a = aggregate_prompt(PromptSpec.from_mask(mask), part, feats).data
    b = aggregate_prompt(PromptSpec.from_mask(mask[perm]), part2, feats2).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_empty_prompts_rejected():
    part, feats = click_fixture(2)
    with pytest.raises(EmptyPromptError):
        aggregate_prompt(
            PromptSpec.from_box([90.0, 90.0, 90.0], [91.0, 91.0, 91.0]), part, feats
        )
    with pytest.raises(EmptyPromptError):
        aggregate_prompt(
            PromptSpec.from_mask(np.zeros(10, dtype=np.int64)), part, feats
        )


def test_prompt_gradient_flows_to_features():
    part, _ = click_fixture(3)
    feats = Tensor(np.random.default_rng(1).standard_normal((10, 6)),
                   requires_grad=True)
    prompt = PromptSpec.from_click([1.0, 1.0, 1.0])
    check_grads(lambda: aggregate_prompt(prompt, part, feats).sum(), [feats])
