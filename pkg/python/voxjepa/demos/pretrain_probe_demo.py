# %%
# Builds a small phantom corpus, pretrains a tiny encoder for a handful of steps, fits an
# attentive probe on its frozen latents and evaluates it on the held-out studies.

import tempfile
import time
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

import voxjepa as vj
from voxjepa.evalstats import EvalConfig, evaluate_classes
from voxjepa.model.config import EncoderConfig, PredictorConfig, TrainConfig
from voxjepa.model.train import train, window_curve
from voxjepa.plot import plot_collapse_monitor, plot_heatmap_slice, plot_loss_curve, plot_metric_bars
from voxjepa.probe import (
    ProbeConfig,
    attention_heatmap,
    bags_from_shards,
    class_weights_from_labels,
    probe_forward,
    probe_train,
)
from voxjepa.shardstore import VolumeMeta

sns.set_theme()

SHOW_PLOTS = vj.utils.show_plots()
N_STUDIES = 24
STEPS = 8 if not SHOW_PLOTS else 60
LABELS = ["any_lesion", "hyper_left", "hyper_right"]

workdir = Path(tempfile.mkdtemp(prefix="voxjepa_demo_"))

# %%
t0 = time.perf_counter()
corpus_config = vj.CorpusConfig(
    n_studies=N_STUDIES,
    grid_shape=(16, 32, 32),
    spacing_mm=(4.0, 1.0, 1.0),
    radius_range=(1.5, 2.0),
    seed=11,
)
records = vj.build_corpus(N_STUDIES, corpus_config, workdir / "corpus")
writer = vj.ShardWriter(workdir / "shards")
for rec in records:
    for j, rel in enumerate(rec.volume_paths):
        raw = vj.read_volume(workdir / "corpus" / rel)
        for pv in vj.preprocess_volume(raw):
            writer.append_volume(pv, VolumeMeta(rec.study_id, f"{rec.study_id}_{j}", rec.labels, rec.split))
manifest = writer.finalize()
reader = vj.ShardReader(workdir / "shards", verify=True)
t1 = time.perf_counter()
print(f"Time to build and pack {N_STUDIES} studies: {t1 - t0:.3g} s")
print("window means:", manifest.window_means)

# %%
train_config = TrainConfig(
    steps=STEPS,
    batch=vj.BatchSpec(batch_size=2),
    encoder=EncoderConfig(embed_dim=16, depth=1, heads=2),
    predictor=PredictorConfig(embed_dim=16, depth=1, heads=2),
    seed=5,
    # too short a run to judge collapse; the monitor is plotted below instead
    check_collapse=False,
)
t0 = time.perf_counter()
result = train(reader, train_config, workdir / "pretrain")
t1 = time.perf_counter()
print(f"Time to pretrain {STEPS} steps: {t1 - t0:.3g} s")
first, last = window_curve(result.metrics)
print(f"loss over the first window {first:.4g}, over the last window {last:.4g}")

fig, ax = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
plot_loss_curve(result.metrics, ax[0])
plot_collapse_monitor(result.metrics, ax[1])
if SHOW_PLOTS:
    plt.show()

# %%
teacher = result.model.teacher
bags = bags_from_shards(reader, teacher, LABELS, "train")
val_bags = bags_from_shards(reader, teacher, LABELS, "val")
test_bags = bags_from_shards(reader, teacher, LABELS, "test")
y = np.stack([b.labels for b in bags])
y_val = np.stack([b.labels for b in val_bags])
weights = class_weights_from_labels(y, LABELS)

t0 = time.perf_counter()
fit = probe_train(
    bags, y, weights, ProbeConfig(labels=LABELS, epochs=20, patience=5), val_bags, y_val
)
t1 = time.perf_counter()
print(f"Time to fit the probe: {t1 - t0:.3g} s, best epoch {fit.best_epoch}")

# %%
eval_bags = val_bags + test_bags
preds = [probe_forward(fit.probe, b) for b in eval_bags]
scores = np.stack([p.bag_logits for p in preds])
labels = np.stack([b.labels for b in eval_bags])
report = evaluate_classes(
    scores, labels, [b.study_id for b in eval_bags], LABELS, config=EvalConfig(replicates=200)
)
print(report)

if report.height:
    fig, ax = plt.subplots(figsize=(6, 4))
    plot_metric_bars(report, "auroc", ax)
    if SHOW_PLOTS:
        plt.show()

heat = attention_heatmap(preds[0], eval_bags[0], LABELS)
fig, ax = plt.subplots(figsize=(5, 5))
plot_heatmap_slice(heat, "any_lesion", ax)
if SHOW_PLOTS:
    plt.show()

# %%
