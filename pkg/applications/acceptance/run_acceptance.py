"""
Desk-scale acceptance run: full pipeline on the bundled desk-scale config followed by
threshold checks on its outputs.  Writes `acceptance.csv` under the run root and exits
nonzero when any check fails.
"""

from pathlib import Path
from typing import List
import json
import logging
import sys
import time

import numpy as np
import polars as pl

import voxjepa as vj
from voxjepa.model.train import window_curve
from voxjepa.phantom import flip_study, sample_study_specs, synthesize_study
from voxjepa.probe import study_volumes
from voxjepa.tokenmask import MaskScheme, context_fraction_stats, crop_foreground, patchify, sample_mask_plan
from voxjepa.utilities import derive_seed

import utils
from utils import Check, at_least, at_most

log = logging.getLogger(__name__)

PIPELINE = [
    "phantom-gen",
    "preprocess",
    "shard-pack",
    "pretrain",
    "probe-train",
    "evaluate",
    "recon",
    "match",
    "cluster",
    "report",
]
LATERAL_CLASSES = ["hyper_left", "hyper_right", "hypo_left", "hypo_right"]
CONTEXT_RANGES = {"SYNTH_MR": (0.13, 0.24), "SYNTH_CT": (0.10, 0.21)}


def masking_checks(config: vj.RunConfig, n_plans: int = 512) -> List[Check]:
    reader = vj.ShardReader(config.paths.resolve("shards"))
    mask_cfg = config.train.mask
    ids = reader.study_ids("train")
    plans = []
    for modality in (vj.Modality.SYNTH_MR, vj.Modality.SYNTH_CT):
        for i in range(n_plans):
            vol = study_volumes(reader, ids[i % len(ids)])[0]
            seed = derive_seed(config.seed, "acceptance-mask", modality.name, i)
            grid = patchify(vol.normalized, vol.foreground, config.train.encoder.patch_shape, mask_cfg.fg_frac)
            grid = crop_foreground(grid, mask_cfg.max_per_axis, seed)
            plans.append(sample_mask_plan(grid, MaskScheme(i % 2), modality, seed, mask_cfg))
    medians = context_fraction_stats(plans)
    checks = []
    for name, (lo, hi) in CONTEXT_RANGES.items():
        med = medians[name]
        checks.append(Check(f"median context fraction {name}", med, lo, lo <= med <= hi, f"range [{lo}, {hi}]"))
    multi = [p.masked_fraction for p in plans if p.scheme == MaskScheme.MULTI_BLOCK_TARGET]
    checks.append(at_least("multi-block masked fraction (min)", min(multi), mask_cfg.masked_fraction))
    return checks


def training_checks(config: vj.RunConfig) -> List[Check]:
    metrics = pl.read_csv(config.paths.resolve("checkpoints") / "metrics.csv")
    first, last = window_curve(metrics, 50)
    return [
        at_most("final/initial 50-step loss", last / first, 0.7),
        at_least(
            "teacher latent std (min over run)",
            float(metrics["teacher_latent_std_min"].min()),  # type: ignore[arg-type]
            config.train.collapse_floor,
        ),
    ]


def _metric(report: pl.DataFrame, metric: str, cls: str):
    rows = report.filter((pl.col("metric") == metric) & (pl.col("class") == cls))
    return float(rows["value"][0]) if rows.height else None


def probe_checks(config: vj.RunConfig) -> List[Check]:
    report = pl.read_csv(config.paths.report_dir("evaluate") / "metrics.csv")
    checks = [at_least("any_lesion AUROC", _metric(report, "auroc", "any_lesion"), 0.90)]
    for name in LATERAL_CLASSES:
        value = _metric(report, "auroc", name)
        if value is not None:
            checks.append(at_least(f"{name} AUROC", value, 0.80))
    pointing = pl.read_csv(config.paths.report_dir("summary") / "pointing.csv")
    if pointing.height:
        acc = float(pointing["hit"].cast(pl.Float64).mean())  # type: ignore[arg-type]
        chance = float(pointing["baseline"].mean())  # type: ignore[arg-type]
        checks.append(at_least("pointing accuracy / random baseline", acc / chance, 2.0))
    lat = json.loads((config.paths.report_dir("evaluate") / "laterality.json").read_text())
    checks.append(at_least("laterality flip AUROC", lat["auroc"], 0.90, f"{lat['n_eligible']} eligible"))
    return checks


def cross_modal_check(config: vj.RunConfig) -> Check:
    """
    The SYNTH_CT-fit probe scored zero-shot on SYNTH_MR renderings of the test phantoms, against
    the SYNTH_MR-fit probe on the same renderings (paired rows written by the evaluate stage).
    """
    rows = json.loads((config.paths.report_dir("evaluate") / "cross_modal.json").read_text())
    match = [
        r
        for r in rows
        if (r["class"], r["source"], r["target"]) == ("any_lesion", "SYNTH_CT", "SYNTH_MR")
    ]
    name = "cross-modal any_lesion |delta AUROC| (CT probe on MR)"
    if not match:
        return Check(name, None, 0.10, False, "no SYNTH_CT -> SYNTH_MR row")
    row = match[0]
    delta = abs(row["delta"])
    note = (
        f"transfer {row['transfer_auroc']:.3f}, native {row['native_auroc']:.3f}, "
        f"CI [{row['ci_lo']:.3f}, {row['ci_hi']:.3f}], {row['n_studies']} studies"
    )
    return Check(name, delta, 0.10, delta <= 0.10, note)


def flip_check(config: vj.RunConfig) -> Check:
    spec = sample_study_specs(config.phantom, 1)[0]
    study = synthesize_study(spec, "flip")
    twice = flip_study(flip_study(study))
    diff = max(float(np.abs(a.voxels - b.voxels).max()) for a, b in zip(study.volumes, twice.volumes))
    same_labels = twice.label_dict() == study.label_dict()
    return Check("double flip max voxel delta", diff, 0.0, diff == 0.0 and same_labels)


def recon_check(config: vj.RunConfig) -> Check:
    recon = pl.read_csv(config.paths.report_dir("recon") / "recon.csv")
    return at_most("self-reference kNN MAE", float(recon["mae"].mean()), 0.1, f"{recon.height} studies")  # type: ignore[arg-type]


def determinism_check(config_path: Path, out: Path, threads: int) -> Check:
    rerun = out.parent / f"{out.name}_rerun"
    utils.run_stages(["phantom-gen"], config_path, rerun, threads)
    a = (out / "corpus" / "corpus.json").read_bytes()
    b = (rerun / "corpus" / "corpus.json").read_bytes()
    return Check("phantom-gen rerun byte-identical", float(a == b), 1.0, a == b)


def main() -> int:
    parser = utils.get_parser(__doc__.strip().splitlines()[0])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    config = vj.load_run_config(args.config)
    # reconstruction is checked against a databank holding the evaluated volume itself
    config.latentlab.self_reference = True
    config.latentlab.n_studies = max(config.latentlab.n_studies, 20)
    args.out.mkdir(parents=True, exist_ok=True)
    config_path = args.out / "acceptance_config.yaml"
    config.to_file(config_path)
    config = config.with_overrides(threads=args.threads, out_dir=args.out).seeded()

    t0 = time.perf_counter()
    if not args.skip_pipeline:
        utils.run_stages(PIPELINE, config_path, args.out, args.threads)
    t1 = time.perf_counter()
    print(f"Elapsed time to run the pipeline: {t1 - t0:.3g} s")

    checks = [
        *masking_checks(config),
        *training_checks(config),
        *probe_checks(config),
        cross_modal_check(config),
        flip_check(config),
        recon_check(config),
        determinism_check(config_path, args.out, args.threads),
    ]
    frame = utils.checks_frame(checks)
    frame.write_csv(args.out / "acceptance.csv")
    with pl.Config(tbl_rows=-1, fmt_str_lengths=60):
        print(frame)
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
