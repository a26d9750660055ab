"""Training-sample machinery: 3x3 neighborhood vectors, global standardization,
and k-means stratified subsampling with elbow-based k selection.

A sample is one interior pixel whose full 3x3 window is fill-free in every
channel; its vector is channel-major, then row-major over the window, so a
C-channel scene yields 9*C-dimensional vectors.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .blockio import atomic_write_bytes, canonical_json_bytes
from .georaster import GridDef, Scene, read_scene, write_scene

# Candidate class counts for real-scale elbow runs; 50 is the operational pick.
PAPER_SCALE_ELBOW_CANDIDATES = [10, 20, 30, 40, 50, 60, 80]


@dataclass(eq=False)
class SampleSet:
    """Flattened neighborhood vectors plus their pixel provenance."""

    vectors: np.ndarray  # (N, D) float32
    scene_ids: np.ndarray  # (N,) str
    rows: np.ndarray  # (N,) int32
    cols: np.ndarray  # (N,) int32
    dates: np.ndarray = field(repr=False)  # (N,) datetime.date, object dtype

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.rows = np.asarray(self.rows, dtype=np.int32)
        self.cols = np.asarray(self.cols, dtype=np.int32)
        self.scene_ids = np.asarray(self.scene_ids, dtype=object)
        self.dates = np.asarray(self.dates, dtype=object)
        n = self.vectors.shape[0]
        for name, arr in (("scene_ids", self.scene_ids), ("rows", self.rows),
                          ("cols", self.cols), ("dates", self.dates)):
            if arr.shape != (n,):
                raise ValueError(f"{name} length {arr.shape} != {n} vectors")
        if n and not np.all(np.isfinite(self.vectors)):
            raise ValueError("sample vectors must be finite")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def take(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(
            vectors=self.vectors[idx],
            scene_ids=self.scene_ids[idx],
            rows=self.rows[idx],
            cols=self.cols[idx],
            dates=self.dates[idx],
        )


def concat_sample_sets(sets: list[SampleSet]) -> SampleSet:
    if not sets:
        raise ValueError("no sample sets to concatenate")
    return SampleSet(
        vectors=np.concatenate([s.vectors for s in sets], axis=0),
        scene_ids=np.concatenate([s.scene_ids for s in sets]),
        rows=np.concatenate([s.rows for s in sets]),
        cols=np.concatenate([s.cols for s in sets]),
        dates=np.concatenate([s.dates for s in sets]),
    )


@dataclass
class Normalizer:
    """Per-dimension standardization statistics (population std)."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != self.stds.shape:
            raise ValueError("means/stds shape mismatch")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")


@dataclass
class KmeansModel:
    k: int
    centroids: np.ndarray  # (k, D) float64
    inertia: float

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.k < 1 or self.centroids.shape[0] != self.k:
            raise ValueError("centroid count must equal k >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")


def extract_neighborhoods(scene: Scene) -> SampleSet:
    """One vector per interior pixel with a fully valid 3x3 window."""
    if scene.grid.rows < 3 or scene.grid.cols < 3:
        raise ValueError(f"scene must be at least 3x3, got {scene.grid.rows}x{scene.grid.cols}")
    vectors, rows, cols = kernels.gather_windows(scene.data, scene.fill_value)
    n = vectors.shape[0]
    return SampleSet(
        vectors=vectors,
        scene_ids=np.array([scene.key] * n, dtype=object),
        rows=rows,
        cols=cols,
        dates=np.array([scene.date] * n, dtype=object),
    )


def fit_normalizer(sets: list[SampleSet]) -> Normalizer:
    """Global per-dimension mean and population std over all sets combined.

    Dimensions with zero variance get a sentinel std of 1.0, mapping them to
    exactly zero after centering.
    """
    if not sets or sum(s.n for s in sets) < 2:
        raise ValueError("fit_normalizer needs at least 2 samples")
    stacked = np.concatenate([s.vectors for s in sets], axis=0).astype(np.float64)
    means = stacked.mean(axis=0)
    var = np.maximum(((stacked - means) ** 2).mean(axis=0), 0.0)
    stds = np.sqrt(var)
    stds[stds == 0.0] = 1.0
    return Normalizer(means=means, stds=stds)


def apply_normalizer(sample_set: SampleSet, norm: Normalizer) -> SampleSet:
    if sample_set.dim != norm.means.shape[0]:
        raise ValueError(f"dimension mismatch: vectors are {sample_set.dim}-d, "
                         f"normalizer is {norm.means.shape[0]}-d")
    normalized = (sample_set.vectors.astype(np.float64) - norm.means) / norm.stds
    return SampleSet(
        vectors=normalized.astype(np.float32),
        scene_ids=sample_set.scene_ids,
        rows=sample_set.rows,
        cols=sample_set.cols,
        dates=sample_set.dates,
    )


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd_update(x, labels, centers, sqdist, k):
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    out = centers.copy()
    nonempty = counts > 0
    out[nonempty] = sums[nonempty] / counts[nonempty, None]
    empties = np.nonzero(~nonempty)[0]
    if empties.size:
        # reseed each empty cluster at a distinct farthest point
        order = np.argsort(-sqdist, kind="stable")
        for m, j in enumerate(empties):
            out[j] = x[order[m]]
    return out


def kmeans_cluster(vectors: np.ndarray, k: int, seed: int,
                   max_iter: int = 300) -> tuple[KmeansModel, np.ndarray]:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops when labels stop changing or after ``max_iter`` sweeps. Inertia is
    checked non-increasing on every sweep.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(x, k, rng)

    labels = np.empty(0, dtype=np.int64)
    prev_labels = None
    prev_inertia = np.inf
    inertia = np.inf
    for _ in range(max_iter):
        labels, sqdist = kernels.kmeans_assign(x, centers)
        inertia = float(sqdist.sum())
        assert inertia <= prev_inertia * (1 + 1e-12) + 1e-9, \
            f"inertia increased: {prev_inertia} -> {inertia}"
        prev_inertia = inertia
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        centers = _lloyd_update(x, labels, centers, sqdist, k)
    return KmeansModel(k=k, centroids=centers, inertia=inertia), labels


def elbow_index(ks: np.ndarray, inertias: np.ndarray) -> int:
    """Index of the interior point farthest from the first-last chord.

    Endpoints never win; a flat tie (e.g. an exactly linear curve) resolves to
    the first interior candidate.
    """
    ks = np.asarray(ks, dtype=np.float64)
    inertias = np.asarray(inertias, dtype=np.float64)
    if ks.shape[0] < 3:
        raise ValueError("elbow needs at least 3 candidates")
    k0, kl = ks[0], ks[-1]
    i0, il = inertias[0], inertias[-1]
    num = np.abs((kl - k0) * (i0 - inertias) - (k0 - ks) * (il - i0))
    dist = num / np.hypot(kl - k0, il - i0)
    return 1 + int(np.argmax(dist[1:-1]))


def select_k_elbow(vectors: np.ndarray, candidates: list[int], seed: int) -> int:
    """Pick k by the maximum-chord-distance elbow rule over candidate fits."""
    if len(candidates) < 3:
        raise ValueError("need at least 3 candidate k values")
    if any(b <= a for a, b in zip(candidates, candidates[1:])):
        raise ValueError(f"candidates must be strictly ascending: {candidates}")
    inertias = [kmeans_cluster(vectors, k, seed)[0].inertia for k in candidates]
    return candidates[elbow_index(np.asarray(candidates), np.asarray(inertias))]


def _apportion(sizes: np.ndarray, target_n: int) -> np.ndarray:
    """Equal quotas with proportional largest-remainder deficit redistribution."""
    k = sizes.shape[0]
    alloc = np.minimum(sizes, target_n // k)
    deficit = target_n - int(alloc.sum())
    while deficit > 0:
        rem = sizes - alloc
        total_rem = int(rem.sum())
        if total_rem <= deficit:
            alloc = sizes.copy()
            break
        shares = deficit * rem / total_rem
        base = np.floor(shares).astype(np.int64)
        bonus = deficit - int(base.sum())
        if bonus > 0:
            frac = np.where(rem > 0, shares - base, -1.0)
            order = np.argsort(-frac, kind="stable")
            base[order[:bonus]] += 1
        base = np.minimum(base, rem)
        alloc = alloc + base
        deficit = target_n - int(alloc.sum())
    return alloc


def stratified_subsample(sample_set: SampleSet, labels: np.ndarray,
                         target_n: int, seed: int) -> SampleSet:
    """Seeded per-cluster subsample of exactly ``target_n`` samples.

    Each cluster owes floor(target_n / n_clusters); clusters too small give
    everything and the deficit spreads proportionally over the remaining
    cluster sizes. Selection within a cluster is uniform without replacement.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != sample_set.n:
        raise ValueError("labels length must match sample count")
    if target_n > sample_set.n:
        raise ValueError(f"target_n={target_n} exceeds available {sample_set.n}")
    uniq, sizes = np.unique(labels, return_counts=True)
    alloc = _apportion(sizes.astype(np.int64), target_n)
    rng = np.random.default_rng(seed)
    chosen = []
    for label, quota in zip(uniq, alloc):
        members = np.nonzero(labels == label)[0]
        chosen.append(rng.choice(members, size=int(quota), replace=False))
    idx = np.sort(np.concatenate(chosen))
    return sample_set.take(idx)


# ---------------------------------------------------------------------------
# persistence: SFG1 container with a (D, 1, N) layout plus a JSON sidecar
# {"scene_ids": [...], "rows": [...], "cols": [...], "dates": ["YYYY-MM-DD"]}

def _sidecar_path(path) -> str:
    return str(path) + ".json"


def write_sample_set(sample_set: SampleSet, path) -> None:
    if sample_set.n == 0:
        raise ValueError("cannot persist an empty SampleSet")
    carrier = Scene(
        instrument_id="sampleset",
        date=dt.date(1970, 1, 1),
        grid=GridDef(lat0=0.0, lon0=0.0, dlat=-1.0, dlon=1.0, rows=1, cols=sample_set.n),
        channel_names=[f"d{i}" for i in range(sample_set.dim)],
        data=sample_set.vectors.T[:, None, :],
    )
    write_scene(carrier, path)
    sidecar = {
        "scene_ids": [str(s) for s in sample_set.scene_ids],
        "rows": sample_set.rows.tolist(),
        "cols": sample_set.cols.tolist(),
        "dates": [d.isoformat() for d in sample_set.dates],
    }
    atomic_write_bytes(_sidecar_path(path), canonical_json_bytes(sidecar))


def read_sample_set(path) -> SampleSet:
    carrier = read_scene(path)
    with open(_sidecar_path(path), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return SampleSet(
        vectors=carrier.data[:, 0, :].T,
        scene_ids=np.array(sidecar["scene_ids"], dtype=object),
        rows=np.array(sidecar["rows"], dtype=np.int32),
        cols=np.array(sidecar["cols"], dtype=np.int32),
        dates=np.array([dt.date.fromisoformat(d) for d in sidecar["dates"]], dtype=object),
    )


def save_normalizer(norm: Normalizer, path) -> None:
    atomic_write_bytes(path, canonical_json_bytes(
        {"means": norm.means.tolist(), "stds": norm.stds.tolist()}))


def load_normalizer(path) -> Normalizer:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return Normalizer(means=np.array(d["means"]), stds=np.array(d["stds"]))
