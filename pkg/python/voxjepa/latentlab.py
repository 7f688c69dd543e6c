"""
Latent-space inspection tools: pseudo-reconstruction of predicted latents by nearest-neighbour
retrieval from a patch databank, cross-volume patch matching and k-means anatomy maps built from
overlapping sliding-window embeddings.
"""

from __future__ import annotations
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import polars as pl
from scipy import ndimage
from sklearn.cluster import kmeans_plusplus

from voxjepa import defaults
from voxjepa.autodiff.tensor import no_grad
from voxjepa.errors import DataError, EmptyVolumeError, ShapeError
from voxjepa.model.encoder import Encoder, encode, encode_grid
from voxjepa.model.predictor import predict_targets
from voxjepa.model.train import JepaModel
from voxjepa.probe import BagVolume
from voxjepa.serde import SerdeAPI
from voxjepa.tokenmask import MaskConfig, MaskScheme, PatchGrid, patchify, sample_mask_plan
from voxjepa.volume import Modality, RawVolume, write_volume

log = logging.getLogger(__name__)

MATCH_SCHEMA = {
    "query_z": pl.Int64,
    "query_y": pl.Int64,
    "query_x": pl.Int64,
    "match_z": pl.Int64,
    "match_y": pl.Int64,
    "match_x": pl.Int64,
    "similarity": pl.Float64,
    "query_region": pl.Int64,
    "match_region": pl.Int64,
    "same_region": pl.Boolean,
    "exact": pl.Boolean,
    "n_candidates": pl.Int64,
    "chance_same_region": pl.Float64,
}


@dataclass
class LatentLabConfig(SerdeAPI):
    """
    Attributes:
        - `knn_k`: neighbours averaged per predicted latent
        - `kmeans_k`: clusters of the anatomy map
        - `kmeans_max_iter`: Lloyd iteration cap
        - `max_queries`: patch-match queries per volume pair, 0 for every query token
        - `n_reference`: training studies whose volumes fill the databank
        - `n_studies`: test studies reconstructed, matched or clustered
        - `self_reference`: also put each reconstructed volume's own patches in the databank
        - `seed`: seed of target sampling, k-means seeding and query subsampling
    """

    knn_k: int = defaults.KNN_K
    kmeans_k: int = defaults.KMEANS_K
    kmeans_max_iter: int = defaults.KMEANS_MAX_ITER
    max_queries: int = 0
    n_reference: int = 8
    n_studies: int = 4
    self_reference: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.knn_k < 1 or self.kmeans_k < 1 or self.kmeans_max_iter < 1:
            raise ValueError("knn_k, kmeans_k and kmeans_max_iter must be >= 1")
        if self.max_queries < 0:
            raise ValueError(f"max_queries must be >= 0, got {self.max_queries}")
        if self.n_reference < 1 or self.n_studies < 1:
            raise ValueError("n_reference and n_studies must be >= 1")


def unit_rows(x: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Rows scaled to unit L2 norm; all-zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0.0, norms, 1.0)


@dataclass
class PatchDatabank:
    """
    Teacher latents of reference patches paired with the raw patch payloads.

    Attributes:
        - `keys`: (M, d) unit-norm latents
        - `values`: (M, *patch_shape) voxel payloads
        - `volume_ids`: (M,) source volume of each entry
        - `coords`: (M, 3) patch coordinate of each entry in its source lattice
        - `patch_shape`: voxels per patch
    """

    keys: npt.NDArray[np.float64]
    values: npt.NDArray[np.float64]
    volume_ids: npt.NDArray[np.str_]
    coords: npt.NDArray[np.int64]
    patch_shape: Tuple[int, int, int]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ShapeError(f"databank has {len(self.keys)} keys but {len(self.values)} values")

    def __len__(self) -> int:
        return int(self.keys.shape[0])


def build_databank(teacher: Encoder, volumes: Sequence[BagVolume]) -> PatchDatabank:
    """Encodes every foreground token of every reference volume with the frozen `teacher`."""
    if len(volumes) == 0:
        raise DataError("build_databank: empty reference set")
    t0 = time.perf_counter()
    patch_shape = teacher.config.patch_shape
    keys, values, ids, coords = [], [], [], []
    for vol in volumes:
        grid = patchify(vol.normalized, vol.foreground, patch_shape)
        keys.append(encode_grid(teacher, grid).latents.values)
        values.append(grid.payloads)
        ids.extend([vol.volume_id] * grid.n_tokens)
        coords.append(grid.coords)
    bank = PatchDatabank(
        keys=unit_rows(np.concatenate(keys, axis=0)),
        values=np.concatenate(values, axis=0).astype(np.float64),
        volume_ids=np.array(ids),
        coords=np.concatenate(coords, axis=0),
        patch_shape=patch_shape,
    )
    log.info(f"Elapsed time to build a {len(bank)}-entry databank: {time.perf_counter() - t0:.3g} s")
    return bank


def knn_search(
    queries: npt.ArrayLike, databank: PatchDatabank, k: int
) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
    """
    Exhaustive cosine search.  Returns `(indices, similarities)`, each `(Q, k)`, best first;
    equal similarities rank the lower databank index first.  `k` above the databank size is
    clamped.
    """
    if len(databank) == 0:
        raise DataError("knn_search: empty databank")
    if k < 1:
        raise ValueError(f"knn_search: k must be >= 1, got {k}")
    if k > len(databank):
        log.warning(f"k={k} exceeds the databank size {len(databank)}; clamping")
        k = len(databank)
    q = unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    if q.shape[1] != databank.keys.shape[1]:
        raise ShapeError(
            f"knn_search: query width {q.shape[1]} does not match key width {databank.keys.shape[1]}"
        )
    sims = q @ databank.keys.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def retrieve_patches(queries: npt.ArrayLike, databank: PatchDatabank, k: int) -> npt.NDArray[np.float64]:
    """Mean payload of the `k` nearest databank entries of each query."""
    idx, _ = knn_search(queries, databank, k)
    return databank.values[idx].mean(axis=1)


def place_patches(
    volume: npt.ArrayLike,
    coords: npt.ArrayLike,
    patches: npt.ArrayLike,
    patch_shape: Tuple[int, int, int],
) -> npt.NDArray[np.float64]:
    """Copy of `volume` with each patch written at its lattice coordinate (clipped at the border)."""
    out = np.array(volume, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    patches = np.asarray(patches, dtype=np.float64).reshape(len(coords), *patch_shape)
    dims = tuple(-(-n // p) for n, p in zip(out.shape, patch_shape))
    pad = [(0, d * p - n) for d, p, n in zip(dims, patch_shape, out.shape)]
    padded = np.pad(out, pad)
    pz, py, px = patch_shape
    for (z, y, x), patch in zip(coords, patches):
        padded[z * pz : (z + 1) * pz, y * py : (y + 1) * py, x * px : (x + 1) * px] = patch
    return padded[: out.shape[0], : out.shape[1], : out.shape[2]]


@dataclass
class Reconstruction:
    """
    Attributes:
        - `volume`: pseudo-reconstruction, original voxels outside the target patches
        - `target_coords`: (n, 3) reconstructed patch coordinates
        - `neighbors`: (n, k) databank indices used per target
        - `similarities`: (n, k) cosine similarities of those neighbours
    """

    volume: npt.NDArray[np.float64]
    target_coords: npt.NDArray[np.int64]
    neighbors: npt.NDArray[np.int64]
    similarities: npt.NDArray[np.float64]

    def target_mask(self, patch_shape: Tuple[int, int, int]) -> npt.NDArray[np.bool_]:
        ones = np.ones((len(self.target_coords), *patch_shape))
        return place_patches(np.zeros(self.volume.shape), self.target_coords, ones, patch_shape) > 0


def knn_reconstruct(
    model: JepaModel,
    volume: npt.ArrayLike,
    foreground: npt.ArrayLike,
    target_coords: npt.ArrayLike,
    databank: PatchDatabank,
    k: int = defaults.KNN_K,
    fg_frac: float = defaults.TOKEN_FOREGROUND_FRAC,
) -> Reconstruction:
    """
    The student encodes the foreground tokens outside `target_coords`, the predictor emits one
    latent per target, and each target patch is replaced by the mean payload of its `k` nearest
    databank entries.
    """
    volume = np.asarray(volume, dtype=np.float64)
    patch_shape = model.encoder_config.patch_shape
    if tuple(databank.patch_shape) != tuple(patch_shape):
        raise ShapeError(
            f"databank patches {databank.patch_shape} differ from model patches {patch_shape}"
        )
    grid = patchify(volume, foreground, patch_shape, fg_frac)
    targets = np.asarray(target_coords, dtype=np.int64).reshape(-1, 3)
    target_set = {tuple(c) for c in targets.tolist()}
    ctx_ids = [i for i, c in enumerate(grid.coords.tolist()) if tuple(c) not in target_set]
    if not ctx_ids:
        raise EmptyVolumeError("knn_reconstruct: no context tokens left outside the targets")
    ctx_grid = grid.subset(ctx_ids)
    with no_grad():
        ctx = encode(model.student, ctx_grid.flat_payloads(), ctx_grid.coords)
        pred = predict_targets(model.predictor, ctx, targets).values
    if len(targets) == 0:
        empty = np.zeros((0, min(k, len(databank))))
        return Reconstruction(volume.copy(), targets, empty.astype(np.int64), empty)
    idx, sims = knn_search(pred, databank, k)
    patches = databank.values[idx].mean(axis=1)
    return Reconstruction(
        volume=place_patches(volume, targets, patches, patch_shape),
        target_coords=targets,
        neighbors=idx,
        similarities=sims,
    )


def reconstruct_masked(
    model: JepaModel,
    volume: BagVolume,
    databank: PatchDatabank,
    modality: Modality,
    k: int = defaults.KNN_K,
    seed: int = 0,
    mask_config: Optional[MaskConfig] = None,
) -> Reconstruction:
    """Samples a multi-block target plan over the full token grid, then `knn_reconstruct`."""
    mask_config = mask_config or MaskConfig()
    grid = patchify(
        volume.normalized, volume.foreground, model.encoder_config.patch_shape, mask_config.fg_frac
    )
    plan = sample_mask_plan(grid, MaskScheme.MULTI_BLOCK_TARGET, modality, seed, mask_config)
    return knn_reconstruct(
        model,
        volume.normalized,
        volume.foreground,
        grid.coords[plan.target_ids],
        databank,
        k,
        mask_config.fg_frac,
    )


def reconstruction_error(
    recon: Reconstruction, original: npt.ArrayLike, patch_shape: Tuple[int, int, int]
) -> float:
    """Mean absolute voxel error over the reconstructed patches."""
    mask = recon.target_mask(patch_shape)
    if not mask.any():
        raise ValueError("reconstruction has no target voxels")
    return float(np.abs(recon.volume - np.asarray(original, dtype=np.float64))[mask].mean())


def export_reconstruction(
    path: Union[str, Path], recon: Reconstruction, spacing_mm: Tuple[float, float, float]
) -> Path:
    """Writes the reconstruction in the phantom volume format (modality unset)."""
    return write_volume(path, RawVolume(voxels=recon.volume, spacing_mm=spacing_mm, modality=None))


@dataclass
class PatchMatch:
    coord: Tuple[int, int, int]
    similarity: float
    index: int


def patch_match(
    query: npt.ArrayLike, candidates: npt.ArrayLike, coords: npt.ArrayLike
) -> PatchMatch:
    """
    Candidate with the highest cosine similarity to `query`; among exact ties the
    lexicographically smallest coordinate wins.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if candidates.ndim != 2 or len(candidates) == 0:
        raise ValueError("patch_match: empty candidate set")
    if len(coords) != len(candidates):
        raise ShapeError(f"patch_match: {len(candidates)} candidates but {len(coords)} coordinates")
    sims = unit_rows(candidates) @ unit_rows(np.asarray(query, dtype=np.float64).reshape(1, -1))[0]
    best = np.flatnonzero(sims == sims.max())
    if len(best) > 1:
        c = coords[best]
        best = best[np.lexsort((c[:, 2], c[:, 1], c[:, 0]))]
    i = int(best[0])
    return PatchMatch(
        coord=tuple(int(v) for v in coords[i]),  # type: ignore[arg-type]
        similarity=float(np.clip(sims[i], -1.0, 1.0)),
        index=i,
    )


def patch_regions(
    tissue_mask: npt.ArrayLike, coords: npt.ArrayLike, patch_shape: Tuple[int, int, int]
) -> npt.NDArray[np.int64]:
    """Majority tissue code of each patch (ties to the lower code, padding counts as BG)."""
    tissue = np.asarray(tissue_mask, dtype=np.int64)
    dims = tuple(-(-n // p) for n, p in zip(tissue.shape, patch_shape))
    pad = [(0, d * p - n) for d, p, n in zip(dims, patch_shape, tissue.shape)]
    padded = np.pad(tissue, pad)
    pz, py, px = patch_shape
    blocks = padded.reshape(dims[0], pz, dims[1], py, dims[2], px).transpose(0, 2, 4, 1, 3, 5)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    flat = blocks[coords[:, 0], coords[:, 1], coords[:, 2]].reshape(len(coords), -1)
    n_codes = int(padded.max()) + 1
    return np.array([np.bincount(row, minlength=n_codes).argmax() for row in flat], dtype=np.int64)


def match_volumes(
    encoder: Encoder,
    query: BagVolume,
    candidate: BagVolume,
    tissue_mask: npt.ArrayLike,
    max_queries: int = 0,
    seed: int = 0,
) -> pl.DataFrame:
    """
    Matches every query token (or `max_queries` of them, drawn without replacement) to its most
    similar candidate token.  Both volumes share the voxel lattice of `tissue_mask`.  Each row
    carries its analytic chance rates: 1 / candidate count for an exact hit and the candidate
    share of the query's region for a same-region hit.
    """
    patch_shape = encoder.config.patch_shape
    q_grid = patchify(query.normalized, query.foreground, patch_shape)
    c_grid = patchify(candidate.normalized, candidate.foreground, patch_shape)
    q_lat = encode_grid(encoder, q_grid).latents.values
    c_lat = unit_rows(encode_grid(encoder, c_grid).latents.values)
    ids = np.arange(q_grid.n_tokens)
    if 0 < max_queries < len(ids):
        ids = np.sort(np.random.default_rng(seed).choice(ids, size=max_queries, replace=False))
    q_regions = patch_regions(tissue_mask, q_grid.coords, patch_shape)
    c_regions = patch_regions(tissue_mask, c_grid.coords, patch_shape)
    rows = []
    for i in ids:
        m = patch_match(q_lat[i], c_lat, c_grid.coords)
        qc = tuple(int(v) for v in q_grid.coords[i])
        rows.append(
            (
                *qc,
                *m.coord,
                m.similarity,
                int(q_regions[i]),
                int(c_regions[m.index]),
                bool(q_regions[i] == c_regions[m.index]),
                qc == m.coord,
                c_grid.n_tokens,
                float(np.mean(c_regions == q_regions[i])),
            )
        )
    return pl.DataFrame(rows, schema=MATCH_SCHEMA, orient="row")


@dataclass
class MatchSummary:
    """
    Attributes:
        - `exact_rate`: share of queries matched to their own coordinate
        - `same_region_rate`: share matched to a patch of the same tissue region
        - `chance_exact`: mean over queries of 1 / candidate count
        - `chance_same_region`: mean over queries of the candidate share in the query's region
        - `n_queries`: rows summarized
    """

    exact_rate: float
    same_region_rate: float
    chance_exact: float
    chance_same_region: float
    n_queries: int


def summarize_matches(frame: pl.DataFrame) -> MatchSummary:
    """Match rates next to their uniform-random-coordinate baselines."""
    if frame.height == 0:
        raise ValueError("no patch matches to summarize")
    return MatchSummary(
        exact_rate=float(frame["exact"].mean()),  # type: ignore[arg-type]
        same_region_rate=float(frame["same_region"].mean()),  # type: ignore[arg-type]
        chance_exact=float((1.0 / frame["n_candidates"].to_numpy()).mean()),
        chance_same_region=float(frame["chance_same_region"].mean()),  # type: ignore[arg-type]
        n_queries=frame.height,
    )


@dataclass
class WindowEmbedding:
    """
    Embeddings of one patch lattice shifted by `offset` voxels.

    Attributes:
        - `offset`: voxel offset of the lattice origin along (z, y, x)
        - `coords`: (T, 3) patch coordinates within the shifted lattice
        - `latents`: (T, d)
        - `patch_shape`: voxels per patch
    """

    offset: Tuple[int, int, int]
    coords: npt.NDArray[np.int64]
    latents: npt.NDArray[np.float64]
    patch_shape: Tuple[int, int, int]


def window_offsets(patch_shape: Tuple[int, int, int]) -> List[Tuple[int, int, int]]:
    """Lattice shifts of zero or half a patch per axis, unshifted first."""
    return [
        tuple(int(o) for o in off)  # type: ignore[misc]
        for off in itertools.product(*[(0, p // 2) if p > 1 else (0,) for p in patch_shape])
    ]


def sliding_window_embeddings(
    encoder: Encoder,
    volume: npt.ArrayLike,
    foreground: npt.ArrayLike,
    fg_frac: float = defaults.TOKEN_FOREGROUND_FRAC,
) -> List[WindowEmbedding]:
    """Dense overlapping embeddings from every half-patch shifted lattice."""
    volume = np.asarray(volume, dtype=np.float64)
    foreground = np.asarray(foreground, dtype=bool)
    patch_shape = encoder.config.patch_shape
    out = []
    for off in window_offsets(patch_shape):
        sub = (slice(off[0], None), slice(off[1], None), slice(off[2], None))
        try:
            grid: PatchGrid = patchify(volume[sub], foreground[sub], patch_shape, fg_frac)
        except EmptyVolumeError:
            if off == (0, 0, 0):
                raise
            log.debug(f"lattice shifted by {off} holds no foreground token")
            continue
        latents = encode_grid(encoder, grid).latents.values
        out.append(WindowEmbedding(off, grid.coords, np.asarray(latents, dtype=np.float64), patch_shape))
    return out


@dataclass
class KMeansFit:
    """
    Attributes:
        - `centroids`: (k, d)
        - `labels`: assignment of the fitting rows
        - `objective`: sum of squared distances after each assignment step
        - `n_iter`: Lloyd iterations run
    """

    centroids: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    objective: List[float]
    n_iter: int


def assign_clusters(
    x: npt.ArrayLike, centroids: npt.ArrayLike
) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
    """Nearest centroid per row (ties to the lower id) and its squared distance."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d2 = (x**2).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c**2).sum(axis=1)[None, :]
    d2 = np.maximum(d2, 0.0)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), d2[np.arange(len(x)), labels]


def fit_kmeans(
    x: npt.ArrayLike, k: int, seed: int = 0, max_iter: int = defaults.KMEANS_MAX_ITER
) -> KMeansFit:
    """k-means++ seeding followed by Lloyd iterations until the assignment stops changing."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"fit_kmeans expects (n, d) rows, got {x.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ValueError(f"fit_kmeans: {n_distinct} distinct embeddings for k={k}")
    centroids, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    centroids = np.asarray(centroids, dtype=np.float64)
    labels, d2 = assign_clusters(x, centroids)
    objective = [float(d2.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for c in range(k):
            members = labels == c
            # an emptied cluster keeps its centroid
            if members.any():
                centroids[c] = x[members].mean(axis=0)
        new_labels, d2 = assign_clusters(x, centroids)
        objective.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansFit(centroids=centroids, labels=labels, objective=objective, n_iter=n_iter)


@dataclass
class ClusterMap:
    """
    Attributes:
        - `labels`: per-voxel cluster id, -1 outside the foreground
        - `selected`: cluster with the highest IoU against the reference mask
        - `iou`: (k,) IoU of each cluster against the reference mask
        - `fit`: k-means fit on the initial window
    """

    labels: npt.NDArray[np.int64]
    selected: int
    iou: npt.NDArray[np.float64]
    fit: KMeansFit = field(repr=False)


def _window_votes(
    windows: Sequence[WindowEmbedding],
    assignments: Sequence[npt.NDArray[np.int64]],
    volume_shape: Tuple[int, int, int],
    k: int,
) -> npt.NDArray[np.int32]:
    votes = np.zeros((k, *volume_shape), dtype=np.int32)
    for win, lab in zip(windows, assignments):
        p = win.patch_shape
        span = tuple(n - o for n, o in zip(volume_shape, win.offset))
        dims = tuple(-(-s // q) for s, q in zip(span, p))
        lattice = np.full(dims, -1, dtype=np.int64)
        lattice[win.coords[:, 0], win.coords[:, 1], win.coords[:, 2]] = lab
        voxels = lattice.repeat(p[0], 0).repeat(p[1], 1).repeat(p[2], 2)[: span[0], : span[1], : span[2]]
        region = votes[:, win.offset[0] :, win.offset[1] :, win.offset[2] :]
        for c in range(k):
            region[c] += voxels == c
    return votes


def kmeans_cluster(
    windows: Sequence[WindowEmbedding],
    volume_shape: Tuple[int, int, int],
    reference_mask: npt.ArrayLike,
    foreground: npt.ArrayLike,
    k: int = defaults.KMEANS_K,
    seed: int = 0,
    max_iter: int = defaults.KMEANS_MAX_ITER,
) -> ClusterMap:
    """
    Fits centroids on the first window, assigns every window's embeddings, and combines them
    into a voxel map by majority vote (ties to the lower id).  Foreground voxels no window
    covers take the label of the nearest covered voxel.
    """
    if not windows:
        raise ValueError("kmeans_cluster: no window embeddings")
    reference = np.asarray(reference_mask, dtype=bool)
    fg = np.asarray(foreground, dtype=bool)
    if reference.shape != tuple(volume_shape) or fg.shape != tuple(volume_shape):
        raise ShapeError(
            f"kmeans_cluster: masks {reference.shape}/{fg.shape} differ from volume {volume_shape}"
        )
    fit = fit_kmeans(windows[0].latents, k, seed, max_iter)
    assignments = [assign_clusters(w.latents, fit.centroids)[0] for w in windows]
    votes = _window_votes(windows, assignments, tuple(volume_shape), k)
    covered = votes.sum(axis=0) > 0
    if not covered.any():
        raise EmptyVolumeError("kmeans_cluster: windows cover no voxel")
    labels = votes.argmax(axis=0).astype(np.int64)
    if (fg & ~covered).any():
        _, nearest = ndimage.distance_transform_edt(~covered, return_indices=True)
        labels = labels[tuple(nearest)]
    labels = np.where(fg, labels, -1)
    iou = np.zeros(k)
    for c in range(k):
        inter = np.sum((labels == c) & reference)
        union = np.sum((labels == c) | reference)
        iou[c] = inter / union if union else 0.0
    return ClusterMap(labels=labels, selected=int(iou.argmax()), iou=iou, fit=fit)


def cluster_volume(
    encoder: Encoder,
    volume: BagVolume,
    reference_mask: npt.ArrayLike,
    k: int = defaults.KMEANS_K,
    seed: int = 0,
    max_iter: int = defaults.KMEANS_MAX_ITER,
) -> ClusterMap:
    """Sliding-window embeddings of `volume` followed by `kmeans_cluster`."""
    t0 = time.perf_counter()
    windows = sliding_window_embeddings(encoder, volume.normalized, volume.foreground)
    cmap = kmeans_cluster(
        windows, volume.normalized.shape, reference_mask, volume.foreground, k, seed, max_iter
    )
    log.info(f"Elapsed time to cluster {volume.volume_id}: {time.perf_counter() - t0:.3g} s")
    return cmap
