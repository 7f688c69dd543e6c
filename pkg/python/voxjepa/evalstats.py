"""
Evaluation statistics: ranking metrics, study-level bootstrap intervals, Platt scaling,
label-efficiency fits, cross-modal equivalence, the laterality flip test, label co-occurrence
and subgroup separation.
"""

from __future__ import annotations
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import polars as pl
from scipy import special, stats

from voxjepa import defaults
from voxjepa.errors import BootstrapError, FitError, ShapeError, UndefinedMetricError
from voxjepa.phantom import Side, SyntheticStudy, flip_study
from voxjepa.preprocess import PreprocessConfig
from voxjepa.serde import SerdeAPI
from voxjepa.utilities import write_json

if TYPE_CHECKING:
    from voxjepa.model.encoder import Encoder
    from voxjepa.probe import AttentiveProbe

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["metric", "class", "value", "ci_lo", "ci_hi", "n", "replicates", "seed"]


@dataclass
class EvalConfig(SerdeAPI):
    """
    Attributes:
        - `replicates`: bootstrap replicates
        - `seed`: bootstrap seed
        - `equivalence_band`: half-width of the equivalence band on AUROC differences
        - `min_train_positives`, `min_test_positives`: eligibility filter of scaling fits
        - `max_degenerate_frac`: largest tolerated share of single-class replicates
        - `threads`: bootstrap workers
    """

    replicates: int = defaults.BOOTSTRAP_REPLICATES
    seed: int = 0
    equivalence_band: float = defaults.EQUIVALENCE_BAND
    min_train_positives: int = defaults.MIN_TRAIN_POSITIVES
    min_test_positives: int = defaults.MIN_TEST_POSITIVES
    max_degenerate_frac: float = defaults.MAX_DEGENERATE_FRAC
    threads: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if not self.equivalence_band > 0:
            raise ValueError(f"equivalence_band must be > 0, got {self.equivalence_band}")


@dataclass
class ScoredSet:
    """
    Attributes:
        - `scores`: real score per row
        - `labels`: 0/1 per row
        - `study_ids`: bootstrap resampling unit per row; defaults to one study per row
    """

    scores: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    study_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if not self.study_ids:
            self.study_ids = [str(i) for i in range(len(self.scores))]
        if not (len(self.scores) == len(self.labels) == len(self.study_ids)):
            raise ShapeError(
                f"scores ({len(self.scores)}), labels ({len(self.labels)}) and study_ids "
                f"({len(self.study_ids)}) differ in length"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, rows: npt.ArrayLike) -> ScoredSet:
        rows = np.asarray(rows, dtype=np.int64)
        return ScoredSet(self.scores[rows], self.labels[rows], [self.study_ids[i] for i in rows])


ScoreInput = Union[ScoredSet, npt.ArrayLike]


def _unpack(s: ScoreInput, labels: Optional[npt.ArrayLike]) -> Tuple[npt.NDArray, npt.NDArray]:
    if isinstance(s, ScoredSet):
        return s.scores, s.labels
    if labels is None:
        raise ValueError("labels are required when scores are not a ScoredSet")
    scored = ScoredSet(np.asarray(s), np.asarray(labels))
    return scored.scores, scored.labels


def _require_both_classes(y: npt.NDArray, what: str) -> Tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"{what} needs both classes, got {n_pos} positives and {n_neg} negatives")
    return n_pos, n_neg


def auroc(s: ScoreInput, labels: Optional[npt.ArrayLike] = None) -> float:
    """
    Tie-aware AUROC from midranks; equals `(wins + 0.5 * ties) / (P * N)` over all
    positive-negative pairs.
    """
    x, y = _unpack(s, labels)
    n_pos, n_neg = _require_both_classes(y, "auroc")
    ranks = stats.rankdata(x, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairwise(s: ScoreInput, labels: Optional[npt.ArrayLike] = None) -> float:
    """Brute-force pairwise count, quadratic in the number of rows."""
    x, y = _unpack(s, labels)
    n_pos, n_neg = _require_both_classes(y, "auroc")
    pos = x[y == 1][:, None]
    neg = x[y == 0][None, :]
    wins = float((pos > neg).sum()) + 0.5 * float((pos == neg).sum())
    return wins / (n_pos * n_neg)


def auprc(s: ScoreInput, labels: Optional[npt.ArrayLike] = None) -> float:
    """
    Step-wise average precision: sum over distinct thresholds of recall increment times the
    precision at that threshold.
    """
    x, y = _unpack(s, labels)
    n_pos, _ = _require_both_classes(y, "auprc")
    order = np.argsort(-x, kind="stable")
    xs, ys = x[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(xs) != 0), len(xs) - 1]
    tp = np.cumsum(ys)[last_of_group]
    predicted = last_of_group + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion_at(s: ScoreInput, threshold: float, labels: Optional[npt.ArrayLike] = None) -> Confusion:
    """Rows with `score >= threshold` are predicted positive."""
    x, y = _unpack(s, labels)
    pred = x >= threshold
    pos = y == 1
    return Confusion(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


def sensitivity(s: ScoreInput, threshold: float, labels: Optional[npt.ArrayLike] = None) -> float:
    _require_both_classes(_unpack(s, labels)[1], "sensitivity")
    c = confusion_at(s, threshold, labels)
    return c.tp / (c.tp + c.fn)


def specificity(s: ScoreInput, threshold: float, labels: Optional[npt.ArrayLike] = None) -> float:
    _require_both_classes(_unpack(s, labels)[1], "specificity")
    c = confusion_at(s, threshold, labels)
    return c.tn / (c.tn + c.fp)


def balanced_accuracy(s: ScoreInput, threshold: float, labels: Optional[npt.ArrayLike] = None) -> float:
    return 0.5 * (sensitivity(s, threshold, labels) + specificity(s, threshold, labels))


def f1_at(s: ScoreInput, threshold: float, labels: Optional[npt.ArrayLike] = None) -> float:
    _require_both_classes(_unpack(s, labels)[1], "f1")
    c = confusion_at(s, threshold, labels)
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def select_threshold(s: ScoreInput, labels: Optional[npt.ArrayLike] = None) -> float:
    """
    Threshold among the observed scores maximizing balanced accuracy; the lowest wins ties.
    """
    x, y = _unpack(s, labels)
    n_pos, n_neg = _require_both_classes(y, "select_threshold")
    order = np.argsort(-x, kind="stable")
    xs, ys = x[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(xs) != 0), len(xs) - 1]
    tp = np.cumsum(ys)[last_of_group]
    fp = (last_of_group + 1) - tp
    bacc = 0.5 * (tp / n_pos + (n_neg - fp) / n_neg)
    thresholds = xs[last_of_group]
    best = np.flatnonzero(bacc == bacc.max())
    return float(thresholds[best].min())


@dataclass
class BootstrapResult:
    """
    Attributes:
        - `point`: statistic on the full data
        - `lo`, `hi`: percentile interval
        - `values`: statistic per non-degenerate replicate, in replicate order
        - `n_degenerate`: replicates skipped because the statistic was undefined
    """

    point: float
    lo: float
    hi: float
    values: npt.NDArray[np.float64]
    n_degenerate: int
    replicates: int
    seed: int

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.hi - self.lo)


def _study_groups(study_ids: Sequence[str]) -> Tuple[List[str], List[npt.NDArray[np.int64]]]:
    index: Dict[str, List[int]] = {}
    for i, sid in enumerate(study_ids):
        index.setdefault(sid, []).append(i)
    keys = sorted(index)
    return keys, [np.asarray(index[k], dtype=np.int64) for k in keys]


def bootstrap(
    statistic: Callable[[npt.NDArray[np.int64]], float],
    groups: Sequence[npt.NDArray[np.int64]],
    replicates: int = defaults.BOOTSTRAP_REPLICATES,
    seed: int = 0,
    max_degenerate_frac: float = defaults.MAX_DEGENERATE_FRAC,
    threads: int = 1,
    alpha: float = 0.05,
) -> BootstrapResult:
    """
    Resamples whole groups with replacement; `statistic` receives the concatenated row indices
    of the drawn groups.  Replicate `r` draws from `default_rng([seed, r])`, so results do not
    depend on `threads`.
    """
    n_groups = len(groups)
    if n_groups == 0:
        raise ValueError("bootstrap needs at least one group")
    point = statistic(np.concatenate(groups))

    def one(r: int) -> Optional[float]:
        picks = np.random.default_rng([seed, r]).integers(0, n_groups, size=n_groups)
        try:
            return float(statistic(np.concatenate([groups[i] for i in picks])))
        except UndefinedMetricError:
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(replicates)))
    else:
        results = [one(r) for r in range(replicates)]
    values = np.array([v for v in results if v is not None], dtype=np.float64)
    n_degenerate = replicates - len(values)
    if n_degenerate > max_degenerate_frac * replicates or len(values) == 0:
        raise BootstrapError(
            f"{n_degenerate} of {replicates} bootstrap replicates were degenerate; interval unreliable"
        )
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(float(point), float(lo), float(hi), values, n_degenerate, replicates, seed)


def bootstrap_ci(
    metric: Callable[[ScoredSet], float],
    s: ScoredSet,
    replicates: int = defaults.BOOTSTRAP_REPLICATES,
    seed: int = 0,
    max_degenerate_frac: float = defaults.MAX_DEGENERATE_FRAC,
    threads: int = 1,
) -> BootstrapResult:
    """Percentile interval of `metric` under study-level resampling of `s`."""
    _, groups = _study_groups(s.study_ids)
    return bootstrap(
        lambda rows: metric(s.take(rows)), groups, replicates, seed, max_degenerate_frac, threads
    )


@dataclass
class PlattFit:
    a: float
    b: float
    iterations: int
    converged: bool

    def apply(self, scores: npt.ArrayLike) -> npt.NDArray[np.float64]:
        return special.expit(self.a * np.asarray(scores, dtype=np.float64) + self.b)


def platt_calibrate(
    s: ScoreInput,
    labels: Optional[npt.ArrayLike] = None,
    max_iter: int = defaults.PLATT_MAX_ITER,
    tol: float = defaults.PLATT_GRAD_TOL,
) -> PlattFit:
    """
    Maximum-likelihood `(a, b)` of `p = sigmoid(a * score + b)` by Newton steps with
    step halving.  Stops when the gradient norm drops below `tol`, or keeps the current iterate
    when halving finds no step that lowers the loss; when the gradient never vanishes
    (separable data) the last iterate is returned with a warning.
    """
    x, y = _unpack(s, labels)
    _require_both_classes(y, "platt_calibrate")
    X = np.column_stack([x, np.ones_like(x)])
    theta = np.zeros(2)

    def nll(t: npt.NDArray) -> float:
        z = X @ t
        return float(-(y * special.log_expit(z) + (1 - y) * special.log_expit(-z)).sum())

    current = nll(theta)
    for it in range(1, max_iter + 1):
        p = special.expit(X @ theta)
        grad = X.T @ (p - y)
        if np.linalg.norm(grad) < tol:
            return PlattFit(float(theta[0]), float(theta[1]), it - 1, True)
        hess = X.T @ (X * (p * (1 - p))[:, None]) + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            candidate = theta - t * step
            value = nll(candidate)
            if value <= current:
                break
            t *= 0.5
        else:
            log.warning(
                f"Platt scaling line search found no descent at iteration {it}; keeping "
                f"a={theta[0]:.4g}, b={theta[1]:.4g}"
            )
            return PlattFit(float(theta[0]), float(theta[1]), it, False)
        theta, current = candidate, value
    log.warning(
        f"Platt scaling did not converge in {max_iter} iterations (scores likely separate the "
        f"classes); a={theta[0]:.4g}, b={theta[1]:.4g}"
    )
    return PlattFit(float(theta[0]), float(theta[1]), max_iter, False)


@dataclass
class ScalingFit:
    """
    OLS of F1 on log10 of training positives.

    Attributes:
        - `slope`, `intercept`: fitted line
        - `residuals`: per eligible point
        - `covariance`: 2x2 covariance of (slope, intercept)
        - `log_n`, `f1`: eligible points
    """

    slope: float
    intercept: float
    residuals: npt.NDArray[np.float64]
    covariance: npt.NDArray[np.float64]
    log_n: npt.NDArray[np.float64]
    f1: npt.NDArray[np.float64]

    def predict(self, n_pos: npt.ArrayLike) -> npt.NDArray[np.float64]:
        return self.slope * np.log10(np.asarray(n_pos, dtype=np.float64)) + self.intercept


def _ols(x: npt.NDArray, y: npt.NDArray) -> Tuple[npt.NDArray, npt.NDArray, npt.NDArray]:
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(y) - 2, 1)
    cov = (resid @ resid / dof) * np.linalg.pinv(X.T @ X)
    return coef, resid, cov


def fit_label_scaling(
    n_pos: npt.ArrayLike,
    f1: npt.ArrayLike,
    n_test_pos: Optional[npt.ArrayLike] = None,
    min_train_positives: int = defaults.MIN_TRAIN_POSITIVES,
    min_test_positives: int = defaults.MIN_TEST_POSITIVES,
) -> ScalingFit:
    """
    Fits `F1 = slope * log10(n_pos) + intercept` over classes with at least
    `min_train_positives` training and `min_test_positives` test positives.
    """
    n_pos = np.asarray(n_pos, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    keep = n_pos >= min_train_positives
    if n_test_pos is not None:
        keep &= np.asarray(n_test_pos) >= min_test_positives
    if keep.sum() < 3:
        raise FitError(f"label scaling fit needs >= 3 eligible classes, got {int(keep.sum())}")
    x = np.log10(n_pos[keep])
    y = f1[keep]
    coef, resid, cov = _ols(x, y)
    return ScalingFit(float(coef[0]), float(coef[1]), resid, cov, x, y)


@dataclass
class DataEquivalence:
    """
    Fold-increase in training positives system B needs to match system A.

    Attributes:
        - `factor`: point estimate
        - `ci`: bootstrap interval over classes
        - `shared_slope`: True when the slope-difference interval contains 0
        - `slope`: shared slope (or A's slope when not shared)
        - `slope_diff_ci`: bootstrap interval of `slope_a - slope_b`
    """

    factor: float
    ci: Tuple[float, float]
    shared_slope: bool
    slope: float
    slope_diff_ci: Tuple[float, float]
    n_degenerate: int


def _shared_slope_fit(xa, ya, xb, yb) -> npt.NDArray[np.float64]:
    """`(slope, intercept_a, intercept_b)` of the common-slope model."""
    in_a = np.r_[np.ones_like(xa), np.zeros_like(xb)]
    X = np.column_stack([np.r_[xa, xb], in_a, 1.0 - in_a])
    coef, *_ = np.linalg.lstsq(X, np.r_[ya, yb], rcond=None)
    return coef


def _equivalence_factor(xa, ya, xb, yb, shared: bool) -> float:
    if shared:
        slope, c_a, c_b = _shared_slope_fit(xa, ya, xb, yb)
        if not slope > 0:
            raise UndefinedMetricError("shared slope is not positive")
        return float(10 ** ((c_a - c_b) / slope))
    (s_a, c_a), _, _ = _ols(xa, ya)
    (s_b, c_b), _, _ = _ols(xb, yb)
    if not s_b > 0:
        raise UndefinedMetricError("slope of system B is not positive")
    x_ref = float(np.mean(xa))
    x_b = (s_a * x_ref + c_a - c_b) / s_b
    return float(10 ** (x_b - x_ref))


def data_equivalence(
    fit_a: ScalingFit,
    fit_b: ScalingFit,
    replicates: int = defaults.BOOTSTRAP_REPLICATES,
    seed: int = 0,
    max_degenerate_frac: float = defaults.MAX_DEGENERATE_FRAC,
) -> DataEquivalence:
    """
    Shared-slope model when the bootstrap interval of the slope difference contains 0:
    factor `10 ** ((intercept_a - intercept_b) / slope)`.  Otherwise each system keeps its own
    slope and the factor is read off at A's mean log10 positives.  Intervals resample classes
    within each system.
    """
    xa, ya, xb, yb = fit_a.log_n, fit_a.f1, fit_b.log_n, fit_b.f1
    diffs = []
    resamples = []
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        ia = rng.integers(0, len(xa), size=len(xa))
        ib = rng.integers(0, len(xb), size=len(xb))
        resamples.append((ia, ib))
        if np.ptp(xa[ia]) == 0 or np.ptp(xb[ib]) == 0:
            continue
        diffs.append(_ols(xa[ia], ya[ia])[0][0] - _ols(xb[ib], yb[ib])[0][0])
    if not diffs:
        raise BootstrapError("every slope-difference replicate was degenerate")
    d_lo, d_hi = (float(v) for v in np.percentile(diffs, [2.5, 97.5]))
    shared = d_lo <= 1e-12 and d_hi >= -1e-12
    factor = _equivalence_factor(xa, ya, xb, yb, shared)
    values = []
    for ia, ib in resamples:
        try:
            values.append(_equivalence_factor(xa[ia], ya[ia], xb[ib], yb[ib], shared))
        except (UndefinedMetricError, np.linalg.LinAlgError):
            continue
    n_degenerate = replicates - len(values)
    if n_degenerate > max_degenerate_frac * replicates:
        raise BootstrapError(f"{n_degenerate} of {replicates} equivalence replicates were degenerate")
    lo, hi = (float(v) for v in np.percentile(values, [2.5, 97.5]))
    slope = float(_shared_slope_fit(xa, ya, xb, yb)[0]) if shared else fit_a.slope
    return DataEquivalence(factor, (lo, hi), shared, slope, (d_lo, d_hi), n_degenerate)


class Verdict(enum.Enum):
    EQUIVALENT = "equivalent"
    NOT_SHOWN = "not_shown"


@dataclass
class EquivalenceResult:
    delta: float
    ci: Tuple[float, float]
    band: float
    verdict: Verdict
    paired: bool


def equivalence_verdict(ci: Tuple[float, float], band: float) -> Verdict:
    lo, hi = ci
    return Verdict.EQUIVALENT if -band < lo and hi < band else Verdict.NOT_SHOWN


def cross_modal_delta(
    transfer: ScoredSet,
    native: ScoredSet,
    replicates: int = defaults.BOOTSTRAP_REPLICATES,
    seed: int = 0,
    band: float = defaults.EQUIVALENCE_BAND,
    paired: bool = True,
    max_degenerate_frac: float = defaults.MAX_DEGENERATE_FRAC,
) -> EquivalenceResult:
    """
    `AUROC(transfer) - AUROC(native)` with a study-level bootstrap interval.  Paired resampling
    draws the same studies for both sets; unpaired resampling draws each set independently.
    """
    if paired and sorted(transfer.study_ids) != sorted(native.study_ids):
        raise ValueError("paired cross-modal delta needs the same evaluation studies in both score sets")
    t_keys, t_groups = _study_groups(transfer.study_ids)
    n_keys, n_groups = _study_groups(native.study_ids)
    delta = auroc(transfer) - auroc(native)
    values = []
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        t_pick = rng.integers(0, len(t_keys), size=len(t_keys))
        if paired:
            by_key = dict(zip(n_keys, n_groups))
            n_rows = np.concatenate([by_key[t_keys[i]] for i in t_pick])
        else:
            n_rows = np.concatenate([n_groups[i] for i in rng.integers(0, len(n_keys), size=len(n_keys))])
        t_rows = np.concatenate([t_groups[i] for i in t_pick])
        try:
            values.append(auroc(transfer.take(t_rows)) - auroc(native.take(n_rows)))
        except UndefinedMetricError:
            continue
    n_degenerate = replicates - len(values)
    if n_degenerate > max_degenerate_frac * replicates or not values:
        raise BootstrapError(f"{n_degenerate} of {replicates} cross-modal replicates were degenerate")
    lo, hi = (float(v) for v in np.percentile(values, [2.5, 97.5]))
    return EquivalenceResult(float(delta), (lo, hi), band, equivalence_verdict((lo, hi), band), paired)


def flip_statistic(delta_left: npt.ArrayLike, delta_right: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """`(delta_left - delta_right) / 2`; large for right-sided evidence."""
    return 0.5 * (np.asarray(delta_left, dtype=np.float64) - np.asarray(delta_right, dtype=np.float64))


@dataclass
class LateralityResult:
    """
    Attributes:
        - `auroc`: AUROC of the flip statistic against side == RIGHT, `None` when skipped
        - `deltas`: per eligible study: study_id, side, delta_left, delta_right, statistic
        - `n_eligible`: studies with a known side that the probe flags positive
    """

    auroc: Optional[float]
    deltas: pl.DataFrame
    n_eligible: int
    skipped: bool


def laterality_flip_test(
    probe: AttentiveProbe,
    encoder: Encoder,
    studies: Sequence[SyntheticStudy],
    window_means: Dict[str, float],
    label_names: Sequence[str],
    left_classes: Sequence[str] = ("hyper_left", "hypo_left"),
    right_classes: Sequence[str] = ("hyper_right", "hypo_right"),
    flag_class: str = "any_lesion",
    flag_threshold: float = 0.0,
    preprocess_config: Optional[PreprocessConfig] = None,
) -> LateralityResult:
    """
    Re-encodes each left-right flipped study and compares probe logits.  `delta_left` is the
    mean left-class logit after the flip minus before, `delta_right` likewise; the statistic
    `(delta_left - delta_right) / 2` is scored against side == RIGHT.

    Only studies with a LEFT/RIGHT laterality whose `flag_class` logit exceeds
    `flag_threshold` (or, without that class, whose best lateral logit does) are eligible.
    """
    # probe imports this module for its metrics
    from voxjepa.probe import bag_from_raw, probe_forward

    names = list(label_names)
    left = [names.index(c) for c in left_classes if c in names]
    right = [names.index(c) for c in right_classes if c in names]
    if not left or not right:
        raise ValueError(f"label set {names} lacks left {left_classes} or right {right_classes} classes")

    def logits(study: SyntheticStudy) -> npt.NDArray:
        bag = bag_from_raw(
            encoder, study.study_id, study.volumes, window_means, config=preprocess_config
        )
        return probe_forward(probe, bag).bag_logits

    rows = []
    for study in studies:
        if study.laterality not in (Side.LEFT, Side.RIGHT):
            continue
        before = logits(study)
        flag = before[names.index(flag_class)] if flag_class in names else before[left + right].max()
        if not flag > flag_threshold:
            continue
        after = logits(flip_study(study))
        d_left = float(after[left].mean() - before[left].mean())
        d_right = float(after[right].mean() - before[right].mean())
        rows.append(
            {
                "study_id": study.study_id,
                "side": study.laterality.value,
                "delta_left": d_left,
                "delta_right": d_right,
                "statistic": float(flip_statistic(d_left, d_right)),
            }
        )
    schema = {
        "study_id": pl.Utf8,
        "side": pl.Utf8,
        "delta_left": pl.Float64,
        "delta_right": pl.Float64,
        "statistic": pl.Float64,
    }
    deltas = pl.DataFrame(rows, schema=schema)
    if not rows:
        log.warning("laterality flip test skipped: no eligible studies")
        return LateralityResult(None, deltas, 0, True)
    y = (deltas["side"] == Side.RIGHT.value).to_numpy().astype(np.int64)
    try:
        value = auroc(deltas["statistic"].to_numpy(), y)
    except UndefinedMetricError:
        log.warning("laterality flip test skipped: eligible studies cover only one side")
        return LateralityResult(None, deltas, len(rows), True)
    return LateralityResult(value, deltas, len(rows), False)


def cooccurrence(labels: npt.ArrayLike) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.bool_]]:
    """
    `M[i, j] = |i & j| / min(|i|, |j|)` over label columns.  Returns `(M, defined)`; rows and
    columns of classes without positives are NaN and marked undefined.
    """
    y = np.asarray(labels).astype(bool)
    if y.ndim != 2:
        raise ShapeError(f"cooccurrence expects a (studies, classes) matrix, got shape {y.shape}")
    counts = y.sum(axis=0).astype(np.float64)
    inter = (y.T.astype(np.float64) @ y.astype(np.float64))
    denom = np.minimum(counts[:, None], counts[None, :])
    defined = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(denom > 0, inter / np.where(denom > 0, denom, 1.0), np.nan)
    return m, defined


@dataclass
class SeparationIndex:
    value: float
    infinite: bool

    @property
    def excludes_zero(self) -> bool:
        return abs(self.value) > 1.0


def subgroup_separation(delta: float, ci_halfwidth: float) -> SeparationIndex:
    """`S = delta / halfwidth`; a zero halfwidth gives a signed infinity flagged as such."""
    if ci_halfwidth < 0:
        raise ValueError(f"ci_halfwidth must be >= 0, got {ci_halfwidth}")
    if ci_halfwidth == 0:
        return SeparationIndex(float(np.copysign(np.inf, delta)) if delta != 0 else float("nan"), True)
    return SeparationIndex(delta / ci_halfwidth, False)


def subgroup_separation_table(
    s: ScoredSet,
    strata: Sequence[str],
    replicates: int = defaults.BOOTSTRAP_REPLICATES,
    seed: int = 0,
) -> pl.DataFrame:
    """
    Per stratum: `delta = AUROC(stratum) - AUROC(all)`, its bootstrap half-width (resampling
    studies of the whole set) and the separation index.
    """
    strata = np.asarray(list(strata), dtype=object)
    if len(strata) != len(s):
        raise ShapeError(f"{len(strata)} strata for {len(s)} scored rows")
    _, groups = _study_groups(s.study_ids)
    rows = []
    for g in sorted(set(strata.tolist())):
        member = strata == g

        def stat(idx: npt.NDArray[np.int64], member=member) -> float:
            sub = idx[member[idx]]
            return auroc(s.take(sub)) - auroc(s.take(idx))

        try:
            res = bootstrap(stat, groups, replicates, seed)
        except (UndefinedMetricError, BootstrapError) as err:
            log.warning(f"subgroup {g}: separation undefined ({err})")
            continue
        sep = subgroup_separation(res.point, res.halfwidth)
        rows.append(
            {
                "subgroup": str(g),
                "n": int(member.sum()),
                "delta": res.point,
                "ci_lo": res.lo,
                "ci_hi": res.hi,
                "separation": sep.value,
                "infinite": sep.infinite,
            }
        )
    return pl.DataFrame(rows)


def evaluate_classes(
    scores: npt.ArrayLike,
    labels: npt.ArrayLike,
    study_ids: Sequence[str],
    label_names: Sequence[str],
    thresholds: Optional[Dict[str, float]] = None,
    config: Optional[EvalConfig] = None,
) -> pl.DataFrame:
    """
    MetricReport frame with one row per (metric, class): AUROC, AUPRC, F1, balanced accuracy,
    sensitivity and specificity, each with a study-level bootstrap interval.  Classes with a
    single label value in this set are skipped with a warning.  Thresholds default to 0.5 on
    the sigmoid of the score (logit 0).
    """
    config = config or EvalConfig()
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    thresholds = thresholds or {}
    rows = []
    for k, name in enumerate(label_names):
        s = ScoredSet(x[:, k], y[:, k], list(study_ids))
        if len(np.unique(s.labels)) < 2:
            log.warning(f"class {name}: single label value in evaluation set, metrics skipped")
            continue
        t = thresholds.get(name, 0.0)
        metrics: Dict[str, Callable[[ScoredSet], float]] = {
            "auroc": auroc,
            "auprc": auprc,
            "f1": lambda ss, t=t: f1_at(ss, t),
            "balanced_accuracy": lambda ss, t=t: balanced_accuracy(ss, t),
            "sensitivity": lambda ss, t=t: sensitivity(ss, t),
            "specificity": lambda ss, t=t: specificity(ss, t),
        }
        for metric, fn in metrics.items():
            try:
                res = bootstrap_ci(
                    fn, s, config.replicates, config.seed, config.max_degenerate_frac, config.threads
                )
                lo, hi = res.lo, res.hi
                value = res.point
            except BootstrapError as err:
                log.warning(f"class {name} {metric}: {err}")
                value, lo, hi = fn(s), float("nan"), float("nan")
            rows.append(
                {
                    "metric": metric,
                    "class": name,
                    "value": value,
                    "ci_lo": lo,
                    "ci_hi": hi,
                    "n": len(s),
                    "replicates": config.replicates,
                    "seed": config.seed,
                }
            )
    schema = {
        "metric": pl.Utf8,
        "class": pl.Utf8,
        "value": pl.Float64,
        "ci_lo": pl.Float64,
        "ci_hi": pl.Float64,
        "n": pl.Int64,
        "replicates": pl.Int64,
        "seed": pl.Int64,
    }
    return pl.DataFrame(rows, schema=schema)


def write_report(report: pl.DataFrame, out_dir: Union[str, Path], stem: str = "metrics") -> Tuple[Path, Path]:
    """Writes `<stem>.csv` and `<stem>.json` (a list of row objects)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    report.write_csv(csv_path)
    write_json(json_path, _json_safe(report.to_dicts()))
    return csv_path, json_path


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj
