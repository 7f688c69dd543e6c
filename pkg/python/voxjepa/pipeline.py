"""
Subcommand bodies.  Every stage reads its inputs from the run layout in `RunConfig.paths`,
writes into a staging directory handed in by the caller and returns a JSON-ready summary that
ends up in the run manifest.
"""

from __future__ import annotations
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import polars as pl
from tqdm import tqdm

from voxjepa import defaults
from voxjepa.errors import BootstrapError, DataError, NoStudiesError, ShapeError, UndefinedMetricError
from voxjepa.evalstats import (
    REPORT_COLUMNS,
    ScoredSet,
    auroc,
    cooccurrence,
    cross_modal_delta,
    evaluate_classes,
    laterality_flip_test,
    select_threshold,
    subgroup_separation_table,
    write_report,
)
from voxjepa.latentlab import (
    build_databank,
    cluster_volume,
    export_reconstruction,
    match_volumes,
    reconstruct_masked,
    reconstruction_error,
    summarize_matches,
)
from voxjepa.model.encoder import Encoder
from voxjepa.model.train import load_model, train, window_curve
from voxjepa.phantom import (
    PhantomSpec,
    StudyRecord,
    SyntheticStudy,
    Tissue,
    build_corpus,
    load_corpus,
    load_masks,
    sample_study_specs,
    synthesize_study,
)
from voxjepa.preprocess import (
    PreprocVolume,
    load_preproc,
    normalize,
    preprocess_volume,
    save_preproc,
)
from voxjepa.probe import (
    AttentiveProbe,
    BagVolume,
    ProbeResult,
    StudyBag,
    attention_heatmap,
    bags_from_shards,
    class_weights_from_labels,
    export_heatmap_pgm,
    load_probe,
    pointing_accuracy,
    pointing_game,
    predictions_frame,
    probe_forward,
    probe_train,
    random_voxel_baseline,
    rendering_bags,
    resize_labels_nearest,
    resize_mask_nearest,
    save_probe,
    study_modality,
    study_volumes,
)
from voxjepa.run_config import RunConfig, require_inputs
from voxjepa.shardstore import ShardReader, ShardWriter, VolumeMeta
from voxjepa.tokenmask import (
    MaskScheme,
    context_fraction_stats,
    crop_foreground,
    patchify,
    plan_to_pydict,
    sample_mask_plan,
)
from voxjepa.utilities import derive_seed, write_json
from voxjepa.volume import Modality, RawVolume, Window, read_volume, write_volume

log = logging.getLogger(__name__)

PREPROC_INDEX = "index.json"
CHECKPOINT_NAME = "checkpoint.bin"
PROBE_NAME = "probe.bin"
SUMMARY_COLUMNS = ["source", *REPORT_COLUMNS]


@dataclass
class Stage:
    """
    Attributes:
        - `name`: subcommand name
        - `run`: stage body `(config, staging_dir, verbose) -> summary`
        - `inputs`: paths the stage reads, resolved from the config
        - `output`: directory the staging directory is promoted into
    """

    name: str
    run: Callable[[RunConfig, Path, bool], Dict[str, Any]]
    inputs: Callable[[RunConfig], Dict[str, Path]]
    output: Callable[[RunConfig], Path]


# phantom-gen


def run_phantom_gen(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    records = build_corpus(config.phantom.n_studies, config.phantom, out, config.threads, verbose)
    splits = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    return {"n_studies": len(records), "splits": splits}


def corpus_specs(config: RunConfig, records: Sequence[StudyRecord]) -> Dict[str, PhantomSpec]:
    """Re-derives the generating spec of every corpus study from the phantom config."""
    specs = sample_study_specs(config.phantom, len(records))
    out = {}
    for rec, spec in zip(records, specs):
        if rec.seed != spec.seed:
            raise DataError(
                f"corpus study {rec.study_id} has seed {rec.seed} but the phantom config derives "
                f"{spec.seed}; the corpus was generated with a different config"
            )
        out[rec.study_id] = spec
    return out


# preprocess


def _preprocess_record(
    corpus_dir: Path, record: StudyRecord, config: RunConfig, out: Path
) -> List[Dict]:
    rows = []
    for j, rel in enumerate(record.volume_paths):
        raw = read_volume(corpus_dir / rel)
        volume_id = f"{record.study_id}_{j}"
        for pv in preprocess_volume(raw, config.preprocess):
            rel_out = f"volumes/{volume_id}_{pv.window.name}.npz"
            save_preproc(out / rel_out, pv)
            rows.append(
                {
                    "study_id": record.study_id,
                    "volume_id": volume_id,
                    "window": pv.window.name,
                    "path": rel_out,
                    "labels": record.labels,
                    "split": record.split,
                    "shape": list(pv.shape),
                }
            )
    return rows


def run_preprocess(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    corpus_dir = config.paths.resolve("corpus")
    records = load_corpus(corpus_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        futures = [pool.submit(_preprocess_record, corpus_dir, r, config, out) for r in records]
        done = tqdm(futures, desc="preprocess", disable=not verbose)
        index = [row for f in done for row in f.result()]
    write_json(out / PREPROC_INDEX, index)
    return {"n_volumes": len(index), "n_studies": len(records)}


# shard-pack


def load_preproc_index(preproc_dir: Path) -> List[Dict[str, Any]]:
    path = preproc_dir / PREPROC_INDEX
    try:
        return json.loads(path.read_text())
    except OSError as err:
        raise DataError(f"cannot read preprocessing index {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise DataError(f"preprocessing index {path} is not valid JSON: {err}") from err


def run_shard_pack(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    preproc_dir = config.paths.resolve("preproc")
    index = load_preproc_index(preproc_dir)
    writer = ShardWriter(out, config_hash=config.hash())
    for row in tqdm(index, desc="shard-pack", disable=not verbose):
        pv: PreprocVolume = load_preproc(preproc_dir / row["path"])
        meta = VolumeMeta(row["study_id"], row["volume_id"], dict(row["labels"]), row["split"])
        writer.append_volume(pv, meta)
    manifest = writer.finalize()
    ShardReader(out, verify=True)
    return {
        "n_entries": len(manifest.entries),
        "n_shards": len(manifest.shards),
        "window_means": manifest.window_means,
    }


# pretrain


def run_pretrain(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    reader = ShardReader(config.paths.resolve("shards"))
    result = train(reader, config.train, out, verbose=verbose)
    summary: Dict[str, Any] = {"steps": config.train.steps, "checkpoint": CHECKPOINT_NAME}
    if result.metrics.height:
        first, last = window_curve(result.metrics)
        summary.update({"loss_first_window": first, "loss_last_window": last})
    return summary


# probe-train


def _label_matrix(bags: Sequence[StudyBag]) -> npt.NDArray[np.int8]:
    return np.stack([b.labels for b in bags]).astype(np.int8)


def select_thresholds(
    scores: npt.NDArray[np.float64], labels: npt.NDArray, label_names: Sequence[str]
) -> Dict[str, float]:
    """Per class, the validation threshold maximizing balanced accuracy (logit 0 when undefined)."""
    out = {}
    for k, name in enumerate(label_names):
        try:
            out[name] = select_threshold(scores[:, k], labels[:, k])
        except UndefinedMetricError:
            out[name] = 0.0
    return out


def modality_probe_name(modality: Modality) -> str:
    """File name of the probe fit on one pseudo-modality's train studies only."""
    return f"probe_{modality.name}.bin"


def _fit_probe(
    bags: Sequence[StudyBag],
    val_bags: Sequence[StudyBag],
    names: Sequence[str],
    config: RunConfig,
    verbose: bool,
) -> Tuple[ProbeResult, npt.NDArray[np.float64]]:
    y = _label_matrix(bags)
    y_val = _label_matrix(val_bags) if val_bags else None
    weights = class_weights_from_labels(y, names)
    result = probe_train(bags, y, weights, config.probe, val_bags or None, y_val, verbose)
    return result, weights


def fit_modality_probes(
    reader: ShardReader,
    encoder: Encoder,
    config: RunConfig,
    out: Path,
    verbose: bool = False,
) -> Dict[str, Any]:
    """
    Fits one probe per pseudo-modality on that modality's train (and val) studies alone and
    saves it as `modality_probe_name(modality)`.  A modality without train studies is skipped.
    Returns, per fitted modality, the train study ids and the best epoch.
    """
    names = config.probe.labels
    fitted: Dict[str, Any] = {}
    for modality in Modality:
        bags = bags_from_shards(reader, encoder, names, "train", verbose, modality)
        if not bags:
            log.warning(f"no {modality.name} train studies; {modality.name} probe not fit")
            continue
        val_bags = bags_from_shards(reader, encoder, names, "val", verbose, modality)
        result, _ = _fit_probe(bags, val_bags, names, config, verbose)
        save_probe(result.probe, out / modality_probe_name(modality), config.probe)
        result.history.write_csv(out / f"history_{modality.name}.csv")
        fitted[modality.name] = {
            "train_studies": [b.study_id for b in bags],
            "n_val": len(val_bags),
            "best_epoch": result.best_epoch,
        }
    write_json(out / "modality_probes.json", fitted)
    return fitted


def run_probe_train(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    reader = ShardReader(config.paths.resolve("shards"))
    names = config.probe.labels
    teacher = load_model(config.paths.resolve("checkpoints") / CHECKPOINT_NAME).teacher
    bags = bags_from_shards(reader, teacher, names, "train", verbose)
    if not bags:
        raise NoStudiesError("no studies in the train split")
    val_bags = bags_from_shards(reader, teacher, names, "val", verbose)
    result, weights = _fit_probe(bags, val_bags, names, config, verbose)
    save_probe(result.probe, out / PROBE_NAME, config.probe)
    result.history.write_csv(out / "history.csv")
    thresholds = {name: 0.0 for name in names}
    if val_bags:
        preds = [probe_forward(result.probe, b) for b in val_bags]
        val_scores = np.stack([p.bag_logits for p in preds])
        thresholds = select_thresholds(val_scores, _label_matrix(val_bags), names)
    write_json(out / "thresholds.json", thresholds)
    per_modality = fit_modality_probes(reader, teacher, config, out, verbose)
    return {
        "n_train": len(bags),
        "n_val": len(val_bags),
        "best_epoch": result.best_epoch,
        "class_weights": dict(zip(names, weights.tolist())),
        "modality_probes": {m: len(v["train_studies"]) for m, v in per_modality.items()},
    }


# evaluate


def _load_probe_stage(config: RunConfig):
    probe, probe_cfg = load_probe(config.paths.resolve("probe") / PROBE_NAME)
    thresholds_path = config.paths.resolve("probe") / "thresholds.json"
    thresholds = json.loads(thresholds_path.read_text()) if thresholds_path.exists() else {}
    return probe, probe_cfg, thresholds


def _modality_of(reader: ShardReader, study_id: str) -> str:
    return study_modality(reader, study_id).name


def load_modality_probes(probe_dir: Path) -> Dict[Modality, AttentiveProbe]:
    """Per-modality probes present under `probe_dir`."""
    probes = {}
    for modality in Modality:
        path = probe_dir / modality_probe_name(modality)
        if path.exists():
            probes[modality] = load_probe(path)[0]
    return probes


def cross_modal_transfer(
    probes: Dict[Modality, AttentiveProbe],
    encoder: Encoder,
    studies: Sequence[SyntheticStudy],
    window_means: Dict[str, float],
    config: RunConfig,
) -> List[Dict[str, Any]]:
    """
    Zero-shot transfer per class and direction.  Every study must carry both renderings.  For
    target modality B and source A, the probe fit on A and the probe fit on B score the same
    B-rendered bags, and `cross_modal_delta` compares them with a paired study bootstrap.
    """
    names = config.probe.labels
    ids = [s.study_id for s in studies]
    rows = []
    for source, target in itertools.permutations(Modality, 2):
        if source not in probes or target not in probes:
            log.warning(f"cross-modal {source.name} -> {target.name} skipped: probe missing")
            continue
        bags = rendering_bags(encoder, studies, target, window_means, names, config.preprocess)
        transfer = np.stack([probe_forward(probes[source], b).bag_logits for b in bags])
        native = np.stack([probe_forward(probes[target], b).bag_logits for b in bags])
        labels = _label_matrix(bags)
        for k, name in enumerate(names):
            t_set = ScoredSet(transfer[:, k], labels[:, k], ids)
            n_set = ScoredSet(native[:, k], labels[:, k], ids)
            try:
                res = cross_modal_delta(
                    t_set,
                    n_set,
                    config.eval.replicates,
                    config.eval.seed,
                    config.eval.equivalence_band,
                    paired=True,
                    max_degenerate_frac=config.eval.max_degenerate_frac,
                )
            except (UndefinedMetricError, BootstrapError) as err:
                direction = f"{source.name} -> {target.name}"
                log.warning(f"class {name}: cross-modal {direction} undefined ({err})")
                continue
            rows.append(
                {
                    "class": name,
                    "source": source.name,
                    "target": target.name,
                    "transfer_auroc": auroc(t_set),
                    "native_auroc": auroc(n_set),
                    "delta": res.delta,
                    "ci_lo": res.ci[0],
                    "ci_hi": res.ci[1],
                    "band": res.band,
                    "verdict": res.verdict.name,
                    "n_studies": len(ids),
                }
            )
    return rows


def run_evaluate(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    reader = ShardReader(config.paths.resolve("shards"))
    probe, probe_cfg, thresholds = _load_probe_stage(config)
    names = probe_cfg.labels
    model = load_model(config.paths.resolve("checkpoints") / CHECKPOINT_NAME)
    bags = bags_from_shards(reader, model.teacher, names, "test", verbose)
    if not bags:
        raise NoStudiesError("no studies in the test split")
    preds = [probe_forward(probe, b) for b in bags]
    scores = np.stack([p.bag_logits for p in preds])
    labels = _label_matrix(bags)
    ids = [b.study_id for b in bags]
    report = evaluate_classes(scores, labels, ids, names, thresholds, config.eval)
    write_report(report, out, "metrics")
    predictions_frame(bags, preds, names).write_csv(out / "predictions.csv")

    modalities = [_modality_of(reader, sid) for sid in ids]
    if "any_lesion" in names:
        k = names.index("any_lesion")
        s = ScoredSet(scores[:, k], labels[:, k], ids)
        try:
            table = subgroup_separation_table(s, modalities, config.eval.replicates, config.eval.seed)
            table.write_csv(out / "subgroups.csv")
        except UndefinedMetricError as err:
            log.warning(f"subgroup separation skipped: {err}")

    all_records = load_corpus(config.paths.resolve("corpus"))
    specs = corpus_specs(config, all_records)
    records = [r for r in all_records if r.split == "test"]
    window_means = reader.manifest.window_means
    both = [Modality.SYNTH_CT, Modality.SYNTH_MR]
    rendered = [synthesize_study(specs[r.study_id], r.study_id, both) for r in records]
    modality_probes = load_modality_probes(config.paths.resolve("probe"))
    cross = cross_modal_transfer(modality_probes, model.teacher, rendered, window_means, config)
    write_json(out / "cross_modal.json", cross)

    studies = [synthesize_study(specs[r.study_id], r.study_id) for r in records]
    lat = laterality_flip_test(
        probe,
        model.teacher,
        studies,
        window_means,
        names,
        preprocess_config=config.preprocess,
    )
    lat.deltas.write_csv(out / "laterality.csv")
    write_json(
        out / "laterality.json",
        {"auroc": lat.auroc, "n_eligible": lat.n_eligible, "skipped": lat.skipped},
    )
    return {
        "n_test": len(bags),
        "n_metrics": report.height,
        "n_cross_modal": len(cross),
        "laterality_auroc": lat.auroc,
    }


# recon


def run_recon(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    lab = config.latentlab
    reader = ShardReader(config.paths.resolve("shards"))
    model = load_model(config.paths.resolve("checkpoints") / CHECKPOINT_NAME)
    test_ids = reader.study_ids("test")[: lab.n_studies]
    if not test_ids:
        raise NoStudiesError("no studies in the test split")
    ref_ids = reader.study_ids("train")[: lab.n_reference]
    refs = [v for sid in ref_ids for v in study_volumes(reader, sid)]
    bank = build_databank(model.teacher, refs) if refs else None
    spacing = (
        config.preprocess.target_acquisition_mm,
        config.preprocess.target_inplane_mm,
        config.preprocess.target_inplane_mm,
    )
    rows = []
    for sid in tqdm(test_ids, desc="recon", disable=not verbose):
        vol = study_volumes(reader, sid)[0]
        study_bank = bank
        if lab.self_reference or bank is None:
            study_bank = build_databank(model.teacher, [*refs, vol])
        recon = reconstruct_masked(
            model,
            vol,
            study_bank,
            Modality[_modality_of(reader, sid)],
            lab.knn_k,
            derive_seed(lab.seed, "recon", sid),
            config.train.mask,
        )
        export_reconstruction(out / f"{sid}_recon.vpha", recon, spacing)
        write_volume(out / f"{sid}_input.vpha", RawVolume(vol.normalized, spacing))
        patch_shape = model.encoder_config.patch_shape
        rows.append(
            {
                "study_id": sid,
                "window": vol.window,
                "n_targets": len(recon.target_coords),
                "mae": reconstruction_error(recon, vol.normalized, patch_shape),
                "mean_similarity": (
                    float(recon.similarities.mean()) if recon.similarities.size else float("nan")
                ),
            }
        )
    frame = pl.DataFrame(rows)
    frame.write_csv(out / "recon.csv")
    return {"n_studies": len(rows), "mean_mae": float(frame["mae"].mean())}  # type: ignore[arg-type]


# match


def _window_volume(
    raw: RawVolume, window: Window, config: RunConfig, means: Dict[str, float]
) -> BagVolume:
    for pv in preprocess_volume(raw, config.preprocess):
        if pv.window == window:
            normalized = normalize(pv, means.get(pv.window.name, 0.0))
            return BagVolume(pv.window.name, pv.window.name, normalized, pv.foreground)
    raise DataError(f"preprocessing produced no {window.name} volume")


def run_match(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    """Zero-shot matching of SYNTH_MR tokens onto the SYNTH_CT rendering of the same phantom."""
    lab = config.latentlab
    reader = ShardReader(config.paths.resolve("shards"))
    model = load_model(config.paths.resolve("checkpoints") / CHECKPOINT_NAME)
    all_records = load_corpus(config.paths.resolve("corpus"))
    specs = corpus_specs(config, all_records)
    records = [r for r in all_records if r.split == "test"][: lab.n_studies]
    if not records:
        raise NoStudiesError("no studies in the test split")
    ct_window = Window[config.preprocess.ct_windows[0]]
    frames = []
    for rec in tqdm(records, desc="match", disable=not verbose):
        renderings = [Modality.SYNTH_MR, Modality.SYNTH_CT]
        study = synthesize_study(specs[rec.study_id], rec.study_id, renderings)
        mr = _window_volume(study.volumes[0], Window.MR, config, reader.manifest.window_means)
        ct = _window_volume(study.volumes[1], ct_window, config, reader.manifest.window_means)
        if mr.normalized.shape != ct.normalized.shape:
            raise ShapeError(
                f"{rec.study_id}: renderings differ in shape "
                f"{mr.normalized.shape} vs {ct.normalized.shape}"
            )
        tissue = resize_labels_nearest(study.tissue_mask, mr.normalized.shape)
        frame = match_volumes(
            model.teacher, mr, ct, tissue, lab.max_queries, derive_seed(lab.seed, "match", rec.study_id)
        )
        frames.append(frame.with_columns(pl.lit(rec.study_id).alias("study_id")))
    matches = pl.concat(frames)
    matches.write_csv(out / "matches.csv")
    summary = asdict(summarize_matches(matches))
    write_json(out / "match_summary.json", summary)
    return summary


# cluster


def run_cluster(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    lab = config.latentlab
    reader = ShardReader(config.paths.resolve("shards"))
    model = load_model(config.paths.resolve("checkpoints") / CHECKPOINT_NAME)
    corpus_dir = config.paths.resolve("corpus")
    records = {r.study_id: r for r in load_corpus(corpus_dir)}
    test_ids = reader.study_ids("test")[: lab.n_studies]
    if not test_ids:
        raise NoStudiesError("no studies in the test split")
    rows = []
    for sid in tqdm(test_ids, desc="cluster", disable=not verbose):
        vol = study_volumes(reader, sid)[0]
        tissue = load_masks(corpus_dir, records[sid])["tissue"]
        brain = resize_labels_nearest(tissue, vol.normalized.shape) == Tissue.BRAIN
        cmap = cluster_volume(
            model.teacher,
            vol,
            brain,
            lab.kmeans_k,
            derive_seed(lab.seed, "cluster", sid),
            lab.kmeans_max_iter,
        )
        np.savez_compressed(out / f"{sid}_clusters.npz", labels=cmap.labels, iou=cmap.iou)
        row = {
            "study_id": sid,
            "selected": cmap.selected,
            "iou_selected": float(cmap.iou[cmap.selected]),
        }
        row.update({f"iou_{c}": float(v) for c, v in enumerate(cmap.iou)})
        rows.append(row)
    frame = pl.DataFrame(rows)
    frame.write_csv(out / "clusters.csv")
    mean_iou = float(frame["iou_selected"].mean())  # type: ignore[arg-type]
    return {"n_studies": len(rows), "mean_iou_selected": mean_iou}


# report


def _summary_row(
    source: str, metric: str, value: Optional[float], cls: str = "", n: int = 0
) -> Dict[str, Any]:
    return {
        "source": source,
        "metric": metric,
        "class": cls,
        "value": float("nan") if value is None else float(value),
        "ci_lo": float("nan"),
        "ci_hi": float("nan"),
        "n": n,
        "replicates": 0,
        "seed": 0,
    }


def _pointing(
    config: RunConfig, bags: Sequence[StudyBag], names: Sequence[str], probe, out: Path
) -> Tuple[pl.DataFrame, int]:
    """Pointing-game hits per positive (study, class) and heatmap export for the first studies."""
    corpus_dir = config.paths.resolve("corpus")
    records = {r.study_id: r for r in load_corpus(corpus_dir)}
    rows, exported = [], 0
    for i, bag in enumerate(bags):
        pred = probe_forward(probe, bag)
        try:
            heat = attention_heatmap(pred, bag, names)
        except ShapeError as err:
            log.warning(f"{bag.study_id}: {err}")
            continue
        masks = load_masks(corpus_dir, records[bag.study_id])
        shape = heat.values.shape[1:]
        fg = resize_labels_nearest(masks["tissue"], shape) != Tissue.BG
        for k, name in enumerate(names):
            if not bag.labels[k] or name not in masks:
                continue
            gt = resize_mask_nearest(masks[name], shape)
            hit = pointing_game(heat.values[k], gt)
            rows.append(
                {
                    "study_id": bag.study_id,
                    "class": name,
                    "hit": hit,
                    "baseline": random_voxel_baseline(gt, fg),
                }
            )
            if i < config.latentlab.n_studies:
                export_heatmap_pgm(heat, name, out / "heatmaps")
                exported += 1
    schema = {"study_id": pl.Utf8, "class": pl.Utf8, "hit": pl.Boolean, "baseline": pl.Float64}
    return pl.DataFrame(rows, schema=schema), exported


def run_report(config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    """Merges every available stage report into `summary.csv`/`summary.json` and exports heatmaps."""
    paths = config.paths
    rows: List[Dict[str, Any]] = []
    metrics_csv = paths.report_dir("evaluate") / "metrics.csv"
    evaluated = metrics_csv.exists()
    if evaluated:
        rows.extend({"source": "evaluate", **r} for r in pl.read_csv(metrics_csv).to_dicts())
        lat = json.loads((paths.report_dir("evaluate") / "laterality.json").read_text())
        rows.append(_summary_row("evaluate", "laterality_flip_auroc", lat["auroc"], n=lat["n_eligible"]))
    recon_csv = paths.report_dir("recon") / "recon.csv"
    if recon_csv.exists():
        recon = pl.read_csv(recon_csv)
        mae = float(recon["mae"].mean())  # type: ignore[arg-type]
        rows.append(_summary_row("recon", "knn_mae", mae, n=recon.height))
    match_json = paths.report_dir("match") / "match_summary.json"
    if match_json.exists():
        m = json.loads(match_json.read_text())
        for key in ("exact_rate", "chance_exact", "same_region_rate", "chance_same_region"):
            rows.append(_summary_row("match", key, m[key], n=m["n_queries"]))
    clusters_csv = paths.report_dir("cluster") / "clusters.csv"
    if clusters_csv.exists():
        cl = pl.read_csv(clusters_csv)
        iou = float(cl["iou_selected"].mean())  # type: ignore[arg-type]
        rows.append(_summary_row("cluster", "parenchyma_iou", iou, n=cl.height))

    records = load_corpus(paths.resolve("corpus"))
    train_labels = np.array(
        [[r.labels.get(n, 0) for n in defaults.LABEL_VOCAB] for r in records if r.split == "train"]
    )
    if len(train_labels):
        matrix, defined = cooccurrence(train_labels)
        table = {"label": list(defaults.LABEL_VOCAB)}
        for k, name in enumerate(defaults.LABEL_VOCAB):
            table[name] = np.where(defined[:, k], matrix[:, k], np.nan)
        pl.DataFrame(table).write_csv(out / "cooccurrence.csv")

    n_heatmaps = 0
    if evaluated:
        probe, probe_cfg, _ = _load_probe_stage(config)
        reader = ShardReader(paths.resolve("shards"))
        model = load_model(paths.resolve("checkpoints") / CHECKPOINT_NAME)
        bags = bags_from_shards(reader, model.teacher, probe_cfg.labels, "test", verbose)
        pointing, n_heatmaps = _pointing(config, bags, probe_cfg.labels, probe, out)
        pointing.write_csv(out / "pointing.csv")
        for name in sorted(set(pointing["class"].to_list())):
            sub = pointing.filter(pl.col("class") == name)
            acc = pointing_accuracy(sub["hit"].to_list())
            chance = float(sub["baseline"].mean())  # type: ignore[arg-type]
            rows.append(_summary_row("report", "pointing_accuracy", acc, name, sub.height))
            rows.append(_summary_row("report", "pointing_random_baseline", chance, name, sub.height))

    if not rows:
        raise DataError(f"nothing to report under {paths.resolve('reports')}")
    schema = {
        "source": pl.Utf8,
        "metric": pl.Utf8,
        "class": pl.Utf8,
        "value": pl.Float64,
        "ci_lo": pl.Float64,
        "ci_hi": pl.Float64,
        "n": pl.Int64,
        "replicates": pl.Int64,
        "seed": pl.Int64,
    }
    summary = pl.DataFrame(rows, schema=schema).select(SUMMARY_COLUMNS)
    write_report(summary, out, "summary")
    return {"n_rows": summary.height, "n_heatmaps": n_heatmaps}


# mask-dump


def run_mask_dump(
    config: RunConfig, out: Path, verbose: bool = False, n_plans: int = 100
) -> Dict[str, Any]:
    """Writes sampled plans of the first training studies and median context fractions."""
    reader = ShardReader(config.paths.resolve("shards"))
    ids = reader.study_ids("train")
    if not ids:
        raise NoStudiesError("no studies in the train split")
    mask_cfg = config.train.mask
    patch_shape = config.train.encoder.patch_shape
    plans = []
    for i in tqdm(range(n_plans), desc="mask-dump", disable=not verbose):
        sid = ids[i % len(ids)]
        vol = study_volumes(reader, sid)[0]
        seed = derive_seed(config.seed, "mask-dump", i)
        grid = patchify(vol.normalized, vol.foreground, patch_shape, mask_cfg.fg_frac)
        grid = crop_foreground(grid, mask_cfg.max_per_axis, seed)
        scheme = MaskScheme(i % 2)
        plan = sample_mask_plan(grid, scheme, Modality[_modality_of(reader, sid)], seed, mask_cfg)
        plans.append(plan)
        if i < 2 * config.latentlab.n_studies:
            write_json(out / f"plan_{i:03d}_{sid}_{scheme.name}.json", plan_to_pydict(plan, grid))
    stats = context_fraction_stats(plans)
    write_json(out / "context_fraction.json", stats)
    return {"n_plans": n_plans, "median_context_fraction": stats}


def _model_inputs(config: RunConfig) -> Dict[str, Path]:
    return {
        "shards": config.paths.resolve("shards"),
        "checkpoint": config.paths.resolve("checkpoints") / CHECKPOINT_NAME,
    }


STAGES: Dict[str, Stage] = {
    s.name: s
    for s in [
        Stage("phantom-gen", run_phantom_gen, lambda c: {}, lambda c: c.paths.resolve("corpus")),
        Stage(
            "preprocess",
            run_preprocess,
            lambda c: {"corpus": c.paths.resolve("corpus") / "corpus.json"},
            lambda c: c.paths.resolve("preproc"),
        ),
        Stage(
            "shard-pack",
            run_shard_pack,
            lambda c: {"preproc": c.paths.resolve("preproc") / PREPROC_INDEX},
            lambda c: c.paths.resolve("shards"),
        ),
        Stage(
            "pretrain",
            run_pretrain,
            lambda c: {"shards": c.paths.resolve("shards")},
            lambda c: c.paths.resolve("checkpoints"),
        ),
        Stage("probe-train", run_probe_train, _model_inputs, lambda c: c.paths.resolve("probe")),
        Stage(
            "evaluate",
            run_evaluate,
            lambda c: {
                **_model_inputs(c),
                "probe": c.paths.resolve("probe") / PROBE_NAME,
                "corpus": c.paths.resolve("corpus") / "corpus.json",
            },
            lambda c: c.paths.report_dir("evaluate"),
        ),
        Stage("recon", run_recon, _model_inputs, lambda c: c.paths.report_dir("recon")),
        Stage(
            "match",
            run_match,
            lambda c: {**_model_inputs(c), "corpus": c.paths.resolve("corpus") / "corpus.json"},
            lambda c: c.paths.report_dir("match"),
        ),
        Stage(
            "cluster",
            run_cluster,
            lambda c: {**_model_inputs(c), "corpus": c.paths.resolve("corpus") / "corpus.json"},
            lambda c: c.paths.report_dir("cluster"),
        ),
        Stage(
            "report",
            run_report,
            lambda c: {"corpus": c.paths.resolve("corpus") / "corpus.json"},
            lambda c: c.paths.report_dir("summary"),
        ),
        Stage(
            "mask-dump",
            run_mask_dump,
            lambda c: {"shards": c.paths.resolve("shards")},
            lambda c: c.paths.report_dir("mask-dump"),
        ),
    ]
}


def run_stage(name: str, config: RunConfig, out: Path, verbose: bool = False) -> Dict[str, Any]:
    stage = STAGES[name]
    require_inputs(stage.inputs(config))
    t0 = time.perf_counter()
    summary = stage.run(config, out, verbose)
    log.info(f"Elapsed time to run {name}: {time.perf_counter() - t0:.3g} s")
    return summary
