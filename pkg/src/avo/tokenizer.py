"""Generic k-means unit tokenizer.

Fits a codebook on feature vectors and encodes feature sequences into
discrete unit sequences. Assignment uses squared Euclidean distance with
ties broken toward the smallest centroid index; fitting is seeded k-means++
followed by Lloyd iterations whose distortion is asserted non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import UnitSequence, read_features, write_features
from .errors import FormatError, ValidationError

_ASSIGN_CHUNK = 1024  # rows per distance block, keeps memory under control


@dataclass(frozen=True, eq=False)
class Codebook:
    """K centroids over a d_f-dimensional feature space."""

    centroids: np.ndarray
    seed: int = 0
    fit_distortions: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        cents = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if cents.ndim != 2 or cents.shape[0] < 1:
            raise ValidationError(f"centroids must be a nonempty 2-D matrix, got shape {cents.shape}")
        if not np.isfinite(cents).all():
            raise ValidationError("centroids contain non-finite values")
        if len(np.unique(cents, axis=0)) != cents.shape[0]:
            raise ValidationError("codebook contains duplicate centroids")
        cents.setflags(write=False)
        object.__setattr__(self, "centroids", cents)

    @property
    def num_units(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per point, plus that squared distance.

    Distances are direct squared differences (not the inner-product
    expansion) so exact ties resolve to the smallest index, matching a
    brute-force scan bit for bit.
    """
    labels = np.empty(len(points), dtype=np.int64)
    dists = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), _ASSIGN_CHUNK):
        block = points[start:start + _ASSIGN_CHUNK]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels[start:start + _ASSIGN_CHUNK] = np.argmin(d2, axis=1)
        dists[start:start + _ASSIGN_CHUNK] = d2[np.arange(len(block)), labels[start:start + len(block)]]
    return labels, dists


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++: D^2-weighted sampling of initial centroids."""
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(len(points))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(points), p=d2 / total)
        else:
            idx = rng.integers(len(points))  # degenerate: all residual mass zero
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def fit_kmeans(features, num_clusters: int, seed: int = 0,
               max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    """Fit a codebook with Lloyd's algorithm.

    Stops after ``max_iters`` or once the relative distortion improvement
    falls below ``tol``. Distortion (mean squared distance to the assigned
    centroid) is asserted non-increasing across iterations; empty clusters
    are reseeded to the point farthest from its assigned centroid.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ValidationError("features contain non-finite values")
    if num_clusters < 1:
        raise ValidationError(f"num_clusters must be >= 1, got {num_clusters}")
    if len(points) < num_clusters:
        raise ValidationError(f"need at least {num_clusters} points, got {len(points)}")

    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeans_pp_init(points, num_clusters, rng)

    history: list[float] = []
    prev = np.inf
    for _ in range(max_iters):
        labels, dists = _nearest(points, centroids)
        counts = np.bincount(labels, minlength=num_clusters)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dists))
            centroids[j] = points[far]
            labels[far] = j
            dists[far] = 0.0
            counts = np.bincount(labels, minlength=num_clusters)
        distortion = float(dists.mean())
        assert distortion <= prev * (1 + 1e-12) + 1e-15, "Lloyd distortion increased"
        history.append(distortion)
        if np.isfinite(prev) and prev - distortion < tol * max(prev, 1e-300):
            break
        prev = distortion
        for j in range(num_clusters):
            centroids[j] = points[labels == j].mean(axis=0)

    return Codebook(
        centroids=centroids.astype(np.float32),
        seed=seed,
        fit_distortions=tuple(history),
    )


def encode_units(codebook: Codebook, features, unit_rate_hz: float = 50.0) -> UnitSequence:
    """Map each feature frame to its nearest centroid id."""
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != codebook.feature_dim:
        raise ValidationError(
            f"features of shape {points.shape} do not match codebook dimension {codebook.feature_dim}"
        )
    labels, _ = _nearest(points, codebook.centroids.astype(np.float64))
    return UnitSequence(units=tuple(int(u) for u in labels),
                        codebook_size=codebook.num_units,
                        unit_rate_hz=unit_rate_hz)


def centroid_lookup(codebook: Codebook, units) -> np.ndarray:
    """Row t of the result is the centroid of unit t (the quantizer's inverse image)."""
    ids = np.asarray(units.units if isinstance(units, UnitSequence) else units, dtype=np.int64)
    if ids.ndim != 1:
        raise ValidationError(f"units must be a flat sequence, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.num_units):
        raise ValidationError(f"unit id outside [0, {codebook.num_units})")
    return codebook.centroids[ids].copy()


def save_codebook(codebook: Codebook, path) -> None:
    """Persist centroids as a DSUF matrix plus a JSON sidecar next to it."""
    path = Path(path)
    write_features(codebook.centroids, path)
    sidecar = {"K": codebook.num_units, "d_f": codebook.feature_dim, "seed": codebook.seed}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                         encoding="ascii")


def load_codebook(path) -> Codebook:
    path = Path(path)
    centroids = read_features(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.is_file():
        raise FormatError(f"{sidecar_path}: missing codebook sidecar")
    sidecar = json.loads(sidecar_path.read_text(encoding="ascii"))
    if sidecar.get("K") != centroids.shape[0] or sidecar.get("d_f") != centroids.shape[1]:
        raise FormatError(f"{sidecar_path}: sidecar shape does not match centroid matrix")
    return Codebook(centroids=centroids, seed=int(sidecar.get("seed", 0)))
