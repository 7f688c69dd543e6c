from __future__ import annotations
from typing import Optional, Sequence

import matplotlib.pyplot as plt
import numpy as np
import numpy.typing as npt
import polars as pl
import seaborn as sns

from voxjepa import defaults
from voxjepa.latentlab import ClusterMap
from voxjepa.probe import Heatmap
from voxjepa.tokenmask import MaskPlan


def plot_loss_curve(metrics: pl.DataFrame, ax: plt.Axes, window: int = 10):
    ax.plot(metrics["step"], metrics["loss"], alpha=0.4, label="loss")
    if metrics.height >= window:
        smooth = metrics["loss"].rolling_mean(window_size=window)
        ax.plot(metrics["step"], smooth, label=f"loss ({window}-step mean)")
    ax.set_ylabel("Smooth L1 loss")
    ax.set_xlabel("Step")
    plt.tight_layout()
    ax.legend()


def plot_collapse_monitor(
    metrics: pl.DataFrame, ax: plt.Axes, floor: float = defaults.COLLAPSE_STD_FLOOR
):
    ax.semilogy(metrics["step"], metrics["teacher_latent_std"], label="mean std")
    ax.semilogy(metrics["step"], metrics["teacher_latent_std_min"], label="min std")
    ax.axhline(floor, color="k", linestyle="--", label="collapse floor")
    ax.set_ylabel("Teacher latent std")
    ax.set_xlabel("Step")
    plt.tight_layout()
    ax.legend()


def plot_heatmap_slice(
    heatmap: Heatmap,
    label: str,
    ax: plt.Axes,
    z: Optional[int] = None,
    background: Optional[npt.NDArray] = None,
):
    """
    Overlays one axial slice of a class attention map on `background`.  Defaults to the slice
    holding the maximum-attention voxel.
    """
    k = heatmap.labels.index(label)
    values = heatmap.values[k]
    if z is None:
        z = int(np.unravel_index(np.argmax(values), values.shape)[0])
    if background is not None:
        ax.imshow(background[z], cmap="gray")
    masked = np.ma.masked_where(values[z] <= 0, values[z])
    ax.imshow(masked, cmap="inferno", alpha=0.7)
    ax.set_title(f"{heatmap.study_id} {label} z={z}")
    ax.axis("off")


def plot_cluster_slice(cluster_map: ClusterMap, ax: plt.Axes, z: Optional[int] = None):
    labels = cluster_map.labels
    if z is None:
        z = labels.shape[0] // 2
    ax.imshow(labels[z], cmap="tab10", vmin=-1, vmax=9, interpolation="nearest")
    ax.set_title(f"clusters z={z}, selected={cluster_map.selected}")
    ax.axis("off")


def plot_context_fractions(plans: Sequence[MaskPlan], ax: plt.Axes):
    frame = pl.DataFrame(
        {
            "context_fraction": [p.context_fraction for p in plans],
            "modality": [p.modality.name for p in plans],
            "scheme": [p.scheme.name for p in plans],
        }
    )
    sns.histplot(
        data=frame.to_dict(as_series=False),
        x="context_fraction",
        hue="modality",
        element="step",
        ax=ax,
    )
    ax.set_xlabel("Visible context fraction")
    plt.tight_layout()


def plot_metric_bars(report: pl.DataFrame, metric: str, ax: plt.Axes):
    """Bar chart of one metric per class with its bootstrap interval."""
    rows = report.filter(pl.col("metric") == metric).sort("class")
    x = np.arange(rows.height)
    values = rows["value"].to_numpy()
    err = np.vstack([values - rows["ci_lo"].to_numpy(), rows["ci_hi"].to_numpy() - values])
    ax.bar(x, values, yerr=np.nan_to_num(err), capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(rows["class"].to_list(), rotation=45, ha="right")
    ax.set_ylabel(metric)
    plt.tight_layout()
