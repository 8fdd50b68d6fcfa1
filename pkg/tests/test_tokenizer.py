import numpy as np
import pytest

from avo.data import UnitSequence
from avo.errors import FormatError, ValidationError
from avo.tokenizer import (
    Codebook,
    centroid_lookup,
    encode_units,
    fit_kmeans,
    load_codebook,
    save_codebook,
)


def _brute_force_assign(points, centroids):
    """Independent nearest-centroid scan: plain loops, float64, first-min wins."""
    labels = []
    for p in np.asarray(points, dtype=np.float64):
        best_j, best_d = 0, np.inf
        for j, c in enumerate(np.asarray(centroids, dtype=np.float64)):
            d = float(((p - c) ** 2).sum())
            if d < best_d:
                best_j, best_d = j, d
        labels.append(best_j)
    return np.array(labels)


def test_encode_matches_brute_force_scan():
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(50):
        k = int(rng.integers(1, 8))
        dim = int(rng.integers(1, 5))
        codebook = Codebook(centroids=rng.standard_normal((k, dim)).astype(np.float32))
        points = rng.standard_normal((int(rng.integers(1, 30)), dim))
        got = encode_units(codebook, points)
        expected = _brute_force_assign(points, codebook.centroids)
        assert np.array_equal(np.array(got.units), expected)


def test_encode_tie_breaks_to_smallest_index():
    codebook = Codebook(centroids=np.array([[1.0, 0.0], [-1.0, 0.0]], dtype=np.float32))
    units = encode_units(codebook, np.zeros((3, 2)))  # equidistant to both
    assert units.units == (0, 0, 0)


def test_single_cluster_centroid_is_the_mean():
    """k=1 Lloyd has a closed form: the centroid converges to the data mean."""
    rng = np.random.Generator(np.random.PCG64(1))
    points = rng.standard_normal((40, 3))
    codebook = fit_kmeans(points, num_clusters=1, seed=0)
    np.testing.assert_allclose(codebook.centroids[0], points.mean(axis=0).astype(np.float32),
                               rtol=1e-5, atol=1e-6)


def test_fit_distortion_monotone_non_increasing():
    rng = np.random.Generator(np.random.PCG64(2))
    for trial in range(100):
        points = rng.standard_normal((int(rng.integers(8, 40)), int(rng.integers(1, 5))))
        k = int(rng.integers(1, 6))
        if len(points) < k:
            continue
        codebook = fit_kmeans(points, num_clusters=k, seed=trial)
        hist = np.array(codebook.fit_distortions)
        assert len(hist) >= 1
        assert (np.diff(hist) <= 1e-12).all(), f"trial {trial}: distortion increased"


def test_fit_is_deterministic_per_seed():
    rng = np.random.Generator(np.random.PCG64(3))
    points = rng.standard_normal((60, 4))
    a = fit_kmeans(points, num_clusters=5, seed=9)
    b = fit_kmeans(points, num_clusters=5, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    c = fit_kmeans(points, num_clusters=5, seed=10)
    assert a.centroids.tobytes() != c.centroids.tobytes()


def test_two_blob_recovery():
    """Well-separated blobs must be recovered to within 0.1 of the true means."""
    rng = np.random.Generator(np.random.PCG64(4))
    mean_a, mean_b = np.array([3.0, 0.0]), np.array([-3.0, 0.0])
    points = np.concatenate([
        mean_a + 0.05 * rng.standard_normal((80, 2)),
        mean_b + 0.05 * rng.standard_normal((80, 2)),
    ])
    codebook = fit_kmeans(points, num_clusters=2, seed=0)
    found = codebook.centroids[np.argsort(codebook.centroids[:, 0])[::-1]]
    assert np.abs(found[0] - mean_a).max() < 0.1
    assert np.abs(found[1] - mean_b).max() < 0.1


def test_empty_cluster_reseed():
    # 3 clusters for points sitting in 2 tight groups: one cluster starts empty
    # somewhere along the way; fitting must still produce 3 distinct centroids.
    points = np.array([[0.0], [0.0], [0.0], [10.0], [10.0], [10.0], [10.0], [0.001]])
    codebook = fit_kmeans(points, num_clusters=3, seed=1)
    assert codebook.num_units == 3
    assert len(np.unique(codebook.centroids, axis=0)) == 3


def test_encode_lookup_identity():
    """encode(lookup(u)) == u: centroids quantize to themselves."""
    rng = np.random.Generator(np.random.PCG64(5))
    for _ in range(100):
        k = int(rng.integers(2, 12))
        dim = int(rng.integers(1, 6))
        codebook = Codebook(centroids=rng.standard_normal((k, dim)).astype(np.float32))
        units = UnitSequence(units=tuple(rng.integers(0, k, int(rng.integers(1, 40)))),
                             codebook_size=k)
        rows = centroid_lookup(codebook, units)
        assert encode_units(codebook, rows).units == units.units


def test_fit_input_validation():
    points = np.zeros((4, 2))
    with pytest.raises(ValidationError):
        fit_kmeans(points, num_clusters=5)  # more clusters than points
    with pytest.raises(ValidationError):
        fit_kmeans(points, num_clusters=0)
    with pytest.raises(ValidationError):
        fit_kmeans(np.array([[np.nan, 0.0]]), num_clusters=1)
    with pytest.raises(ValidationError):
        encode_units(Codebook(centroids=np.ones((2, 3), dtype=np.float32) * [[1], [2]]),
                     np.ones((4, 2)))  # dimension mismatch


def test_codebook_rejects_duplicates():
    with pytest.raises(ValidationError):
        Codebook(centroids=np.array([[1.0, 2.0], [1.0, 2.0]], dtype=np.float32))


def test_codebook_save_load_round_trip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(6))
    codebook = fit_kmeans(rng.standard_normal((50, 3)), num_clusters=4, seed=7)
    path = tmp_path / "cb.dsuf"
    save_codebook(codebook, path)
    back = load_codebook(path)
    assert back.centroids.tobytes() == codebook.centroids.tobytes()
    assert back.seed == 7
    assert (tmp_path / "cb.json").is_file()

    (tmp_path / "cb.json").unlink()
    with pytest.raises(FormatError):
        load_codebook(path)
