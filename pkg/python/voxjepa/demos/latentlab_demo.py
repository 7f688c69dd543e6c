# %%
# Probes the latent space of a randomly initialized encoder: k-means clustering of
# sliding-window embeddings, zero-shot patch matching between the pseudo-MR and pseudo-CT
# renderings of one phantom, and nearest-neighbour reconstruction of masked patches.

import time

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

import voxjepa as vj
from voxjepa.latentlab import (
    build_databank,
    cluster_volume,
    match_volumes,
    reconstruct_masked,
    reconstruction_error,
    summarize_matches,
)
from voxjepa.model.config import EncoderConfig, PredictorConfig
from voxjepa.model.train import build_model
from voxjepa.phantom import Tissue
from voxjepa.plot import plot_cluster_slice
from voxjepa.preprocess import normalize
from voxjepa.probe import BagVolume

sns.set_theme()

SHOW_PLOTS = vj.utils.show_plots()

# %%
spec = vj.PhantomSpec(seed=21, grid_shape=(16, 32, 32), spacing_mm=(4.0, 1.0, 1.0))
study = vj.synthesize_study(spec, "lab_0", [vj.Modality.SYNTH_MR, vj.Modality.SYNTH_CT])


def bag_volume(raw: vj.RawVolume, window: vj.Window) -> BagVolume:
    pv = next(p for p in vj.preprocess_volume(raw) if p.window == window)
    return BagVolume(f"lab_0_{window.name}", window.name, normalize(pv, 0.3), pv.foreground)


mr = bag_volume(study.volumes[0], vj.Window.MR)
ct = bag_volume(study.volumes[1], vj.Window.CT_BRAIN)
model = build_model(
    EncoderConfig(embed_dim=16, depth=1, heads=2), PredictorConfig(embed_dim=16, depth=1, heads=2), seed=0
)

# %%
t0 = time.perf_counter()
cmap = cluster_volume(model.teacher, mr, study.tissue_mask == Tissue.BRAIN, k=3, seed=0)
t1 = time.perf_counter()
print(f"Time to cluster: {t1 - t0:.3g} s")
print("IoU per cluster against the brain mask:", np.round(cmap.iou, 3))

fig, ax = plt.subplots(1, 2, figsize=(8, 4))
ax[0].imshow(mr.normalized[mr.normalized.shape[0] // 2], cmap="gray")
ax[0].axis("off")
plot_cluster_slice(cmap, ax[1])
if SHOW_PLOTS:
    plt.show()

# %%
matches = match_volumes(model.teacher, mr, ct, study.tissue_mask, max_queries=16, seed=0)
summary = summarize_matches(matches)
print(
    f"exact {summary.exact_rate:.3f} (chance {summary.chance_exact:.3f}), "
    f"same region {summary.same_region_rate:.3f} (chance {summary.chance_same_region:.3f})"
)

# %%
bank = build_databank(model.teacher, [ct])
recon = reconstruct_masked(model, ct, bank, vj.Modality.SYNTH_CT, k=1, seed=0)
print(f"{len(recon.target_coords)} patches reconstructed, MAE {reconstruction_error(recon, ct.normalized, (4, 16, 16)):.4f}")

z = ct.normalized.shape[0] // 2
fig, ax = plt.subplots(1, 2, figsize=(8, 4))
ax[0].imshow(ct.normalized[z], cmap="gray")
ax[0].set_title("input")
ax[1].imshow(recon.volume[z], cmap="gray")
ax[1].set_title("kNN reconstruction")
for a in ax:
    a.axis("off")
if SHOW_PLOTS:
    plt.show()

# %%
