# %%
# Synthesizes one head phantom with a left-sided hyperintense lesion, renders it as
# pseudo-CT, runs the preprocessing chain and samples both masking schemes over its tokens.

import time

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

import voxjepa as vj
from voxjepa.phantom import LesionKind, Side
from voxjepa.plot import plot_context_fractions
from voxjepa.tokenmask import MaskScheme

sns.set_theme()

SHOW_PLOTS = vj.utils.show_plots()

# %%
t0 = time.perf_counter()
spec = vj.PhantomSpec(
    seed=3,
    grid_shape=(16, 64, 64),
    spacing_mm=(4.0, 1.0, 1.0),
    pseudo_modality=vj.Modality.SYNTH_CT,
    lesion_config=[vj.LesionSpec(kind=LesionKind.HYPER, radius_vox=2.5, side=Side.LEFT, label_id=0)],
)
study = vj.synthesize_study(spec, "demo_0")
t1 = time.perf_counter()
print(f"Time to synthesize: {t1 - t0:.3g} s")
print("labels:", {k: v for k, v in study.label_dict().items() if v})

# %%
t0 = time.perf_counter()
windows = vj.preprocess_volume(study.volumes[0])
t1 = time.perf_counter()
print(f"Time to preprocess: {t1 - t0:.3g} s")
for pv in windows:
    print(f"{pv.window.name}: shape {pv.shape}, {pv.bit_width}-bit codes, max {int(pv.codes.max())}")

z = int(np.argmax(study.lesion_masks["hyper_left"].sum(axis=(1, 2))))
fig, ax = plt.subplots(1, len(windows) + 1, figsize=(4 * (len(windows) + 1), 4))
ax[0].imshow(study.volumes[0].voxels[z], cmap="gray")
ax[0].set_title(f"raw HU z={z}")
for a, pv in zip(ax[1:], windows):
    a.imshow(pv.codes[z], cmap="gray")
    a.contour(study.lesion_masks["hyper_left"][z], colors="r", linewidths=0.8)
    a.set_title(pv.window.name)
for a in ax:
    a.axis("off")
plt.tight_layout()
if SHOW_PLOTS:
    plt.show()

# %%
brain = windows[0]
grid = vj.patchify(brain.codes.astype(np.float64), brain.foreground, (4, 16, 16))
print(f"{grid.n_tokens} foreground tokens on a {grid.grid_dims} lattice")

plans = [
    vj.sample_mask_plan(grid, scheme, modality, seed)
    for seed in range(200)
    for scheme in MaskScheme
    for modality in (vj.Modality.SYNTH_CT, vj.Modality.SYNTH_MR)
]
for scheme in MaskScheme:
    fracs = [p.context_fraction for p in plans if p.scheme == scheme]
    print(f"{scheme.name}: median visible context {np.median(fracs):.3f}")

fig, ax = plt.subplots(figsize=(8, 4))
plot_context_fractions(plans, ax)
if SHOW_PLOTS:
    plt.show()

# %%
