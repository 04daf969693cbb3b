"""Figure rendering for the CLI report paths.

Every report command writes its delimited output first; these helpers render
a companion PNG next to it. Figures are presentation aids only, so nothing
downstream may parse them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})

# strip creation-time metadata so repeated runs emit identical files
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_flops_figure(expert_counts, per_token_flops, path) -> None:
    fig, ax = plt.subplots()
    ax.plot(expert_counts, per_token_flops, marker="o")
    ax.set_xlabel("experts")
    ax.set_ylabel("forward FLOPs / token")
    lo, hi = min(per_token_flops), max(per_token_flops)
    pad = 0.05 * hi
    ax.set_ylim(0, hi + pad)
    ax.set_title(f"top-1 routing cost, spread {(hi - lo) / lo:.3%}")
    _save(fig, path)


def save_training_curve(records, path) -> None:
    fig, ax = plt.subplots()
    for stage in (1, 2, 3):
        rows = [r for r in records
                if r.get("stage") == stage and ("loss" in r or "total" in r)]
        if rows:
            ax.plot([r["step"] for r in rows],
                    [r.get("loss", r.get("total")) for r in rows],
                    label=f"stage {stage}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)


def save_eval_figure(scene_names, ious, path) -> None:
    fig, ax = plt.subplots()
    x = np.arange(len(scene_names))
    ax.bar(x, ious)
    ax.axhline(float(np.mean(ious)), color="k", ls="--", lw=1,
               label=f"mean {np.mean(ious):.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(scene_names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path)


def save_ablation_figure(settings, values, metric, axis, path) -> None:
    fig, ax = plt.subplots()
    x = np.arange(len(settings))
    ax.plot(x, values, marker="s")
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in settings], rotation=20, ha="right")
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    _save(fig, path)


def save_activation_figure(scene, amap, path) -> None:
    """Superpoint centroids colored by their dominant expert, per layer."""
    n_layers = amap.dominant.shape[0]
    fig, axes = plt.subplots(1, max(n_layers, 1),
                             figsize=(3.2 * max(n_layers, 1), 3.2))
    if n_layers <= 1:
        axes = [axes]
    cents = scene.partition.centroids
    labels = scene.partition.labels
    cmap = plt.get_cmap("tab10")
    for ax, layer, dom in zip(axes, amap.layer_indices, amap.dominant):
        per_point = dom[labels]
        ax.scatter(scene.cloud.points[:, 0], scene.cloud.points[:, 1],
                   c=[cmap(e % 10) for e in per_point], s=2)
        ax.scatter(cents[:, 0], cents[:, 1], c="k", marker="x", s=18)
        ax.set_title(f"layer {layer}")
        ax.set_aspect("equal")
        ax.grid(False)
    _save(fig, path)
