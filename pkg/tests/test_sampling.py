import numpy as np
import pytest

from habfuse.georaster import FILL_VALUE
from habfuse.sampling import (
    PAPER_SCALE_ELBOW_CANDIDATES,
    Normalizer,
    SampleSet,
    apply_normalizer,
    concat_sample_sets,
    elbow_index,
    extract_neighborhoods,
    fit_normalizer,
    kmeans_cluster,
    read_sample_set,
    select_k_elbow,
    stratified_subsample,
    write_sample_set,
)

from conftest import make_scene, random_scene


def exhaustive_window_scan(scene):
    """Independent oracle: per-pixel loop over all 3x3 windows."""
    nch, rows, cols = scene.data.shape
    fill = np.float32(scene.fill_value)
    out = []
    for r in range(1, rows - 1):
        for c in range(1, cols - 1):
            window = scene.data[:, r - 1 : r + 2, c - 1 : c + 2]
            if np.any(window == fill):
                continue
            out.append((r, c, window.reshape(-1).copy()))
    return out


def make_samples(vectors):
    vectors = np.asarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    import datetime as dt

    return SampleSet(
        vectors=vectors,
        scene_ids=np.array(["s"] * n, dtype=object),
        rows=np.zeros(n, np.int32),
        cols=np.arange(n, dtype=np.int32),
        dates=np.array([dt.date(2021, 6, 1)] * n, dtype=object),
    )


class TestExtractNeighborhoods:
    def test_minimal_window_row_major(self):
        raster = np.arange(9, dtype=np.float32).reshape(3, 3)
        got = extract_neighborhoods(make_scene(raster))
        assert got.n == 1
        assert np.array_equal(got.vectors[0], raster.reshape(-1))
        assert got.rows[0] == 1 and got.cols[0] == 1

    def test_corner_fill_kills_only_window(self):
        raster = np.arange(9, dtype=np.float32).reshape(3, 3)
        raster[0, 0] = FILL_VALUE
        assert extract_neighborhoods(make_scene(raster)).n == 0

    def test_two_channel_4x4_counts(self):
        rng = np.random.default_rng(0)
        scene = make_scene(rng.random((2, 4, 4)).astype(np.float32))
        got = extract_neighborhoods(scene)
        assert got.n == 4
        assert got.dim == 18

    def test_channel_major_layout(self):
        rng = np.random.default_rng(1)
        scene = make_scene(rng.random((2, 3, 3)).astype(np.float32))
        got = extract_neighborhoods(scene)
        expected = np.concatenate([scene.data[0].reshape(-1), scene.data[1].reshape(-1)])
        assert np.array_equal(got.vectors[0], expected)

    def test_matches_exhaustive_scan_on_random_scenes(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            scene = random_scene(rng, rows=int(rng.integers(3, 9)),
                                 cols=int(rng.integers(3, 9)),
                                 channels=int(rng.integers(1, 4)),
                                 fill_frac=0.25)
            got = extract_neighborhoods(scene)
            expected = exhaustive_window_scan(scene)
            assert got.n == len(expected)
            for i, (r, c, vec) in enumerate(expected):
                assert got.rows[i] == r and got.cols[i] == c
                assert np.array_equal(got.vectors[i], vec)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="3x3"):
            extract_neighborhoods(make_scene(np.zeros((2, 2), dtype=np.float32)))


class TestNormalizer:
    def test_two_point_case(self):
        norm = fit_normalizer([make_samples([[0.0], [2.0]])])
        assert norm.means[0] == 1.0
        assert norm.stds[0] == 1.0  # population std of {0, 2}

    def test_constant_dimension_sentinel(self):
        norm = fit_normalizer([make_samples([[5.0, 1.0], [5.0, 3.0]])])
        assert norm.stds[0] == 1.0
        out = apply_normalizer(make_samples([[5.0, 1.0]]), norm)
        assert out.vectors[0, 0] == 0.0

    def test_concat_associativity(self):
        rng = np.random.default_rng(3)
        a = make_samples(rng.random((10, 4)))
        b = make_samples(rng.random((7, 4)))
        split = fit_normalizer([a, b])
        merged = fit_normalizer([concat_sample_sets([a, b])])
        assert np.array_equal(split.means, merged.means)
        assert np.array_equal(split.stds, merged.stds)

    def test_standardization_postconditions(self):
        rng = np.random.default_rng(4)
        samples = make_samples(rng.normal(3.0, 2.5, size=(500, 6)))
        norm = fit_normalizer([samples])
        out = apply_normalizer(samples, norm).vectors.astype(np.float64)
        assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(out.std(axis=0) - 1.0) < 1e-6)

    def test_identity_normalizer(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(20, 3)).astype(np.float32)
        out = apply_normalizer(make_samples(v), Normalizer(np.zeros(3), np.ones(3)))
        assert np.array_equal(out.vectors, v)

    def test_scalar_arithmetic(self):
        out = apply_normalizer(make_samples([[3.0]]), Normalizer([1.0], [2.0]))
        assert out.vectors[0, 0] == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            apply_normalizer(make_samples([[1.0, 2.0]]), Normalizer([0.0], [1.0]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_normalizer([])


def blobs(rng, n_per=50, centers=((0.0, 0.0), (30.0, 0.0), (0.0, 30.0)), spread=1.0):
    pts = []
    labels = []
    for i, (x, y) in enumerate(centers):
        pts.append(rng.normal((x, y), spread, size=(n_per, 2)))
        labels.append(np.full(n_per, i))
    return np.concatenate(pts), np.concatenate(labels)


class TestKmeans:
    def test_k1_analytic(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 3))
        model, labels = kmeans_cluster(x, 1, seed=0)
        assert np.allclose(model.centroids[0], x.mean(axis=0))
        assert np.allclose(model.inertia, ((x - x.mean(axis=0)) ** 2).sum())
        assert np.all(labels == 0)

    def test_three_blobs_pure(self):
        rng = np.random.default_rng(7)
        x, truth = blobs(rng)
        model, labels = kmeans_cluster(x, 3, seed=1)
        for lab in range(3):
            members = truth[labels == lab]
            assert members.size
            assert np.all(members == members[0])

    def test_k_equals_n_zero_inertia(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(12, 2))
        model, _ = kmeans_cluster(x, 12, seed=2)
        assert model.inertia == 0.0

    def test_seeded_bit_reproducible(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(200, 5))
        m1, l1 = kmeans_cluster(x, 6, seed=3)
        m2, l2 = kmeans_cluster(x, 6, seed=3)
        assert np.array_equal(l1, l2)
        assert np.array_equal(m1.centroids, m2.centroids)
        assert m1.inertia == m2.inertia

    def test_fewer_points_than_k_rejected(self):
        with pytest.raises(ValueError, match="at least"):
            kmeans_cluster(np.zeros((2, 2)), 3, seed=0)


class TestElbow:
    def test_planted_knee(self):
        # piecewise-linear curve with a sharp knee at k=3; chord distances
        # recomputed by hand below as the independent oracle
        ks = np.array([1, 2, 3, 4, 5], dtype=float)
        inertias = np.array([100.0, 60.0, 20.0, 18.0, 16.0])
        chord = np.hypot(ks[-1] - ks[0], inertias[-1] - inertias[0])
        manual = [
            abs((ks[-1] - ks[0]) * (inertias[0] - inertias[i])
                - (ks[0] - ks[i]) * (inertias[-1] - inertias[0])) / chord
            for i in range(1, 4)
        ]
        assert np.argmax(manual) == 1  # interior index of k=3
        assert elbow_index(ks, inertias) == 2
        assert ks[elbow_index(ks, inertias)] == 3

    def test_linear_curve_first_interior(self):
        ks = np.array([2.0, 4.0, 6.0, 8.0])
        inertias = np.array([80.0, 60.0, 40.0, 20.0])
        assert elbow_index(ks, inertias) == 1

    def test_select_k_on_blobs(self):
        rng = np.random.default_rng(10)
        x, _ = blobs(rng, n_per=60)
        assert select_k_elbow(x, [1, 2, 3, 4, 5, 6], seed=4) == 3

    def test_too_few_candidates_rejected(self):
        with pytest.raises(ValueError):
            select_k_elbow(np.zeros((10, 2)), [1, 2], seed=0)

    def test_non_ascending_rejected(self):
        with pytest.raises(ValueError, match="ascending"):
            select_k_elbow(np.zeros((10, 2)), [1, 3, 2], seed=0)

    def test_paper_scale_candidates_include_50(self):
        assert 50 in PAPER_SCALE_ELBOW_CANDIDATES


class TestStratifiedSubsample:
    def test_full_set_identity(self):
        rng = np.random.default_rng(11)
        samples = make_samples(rng.random((30, 2)))
        labels = rng.integers(0, 3, size=30)
        out = stratified_subsample(samples, labels, 30, seed=0)
        assert out.n == 30
        assert np.array_equal(np.sort(out.vectors, axis=0),
                              np.sort(samples.vectors, axis=0))

    def test_equal_quota(self):
        rng = np.random.default_rng(12)
        samples = make_samples(rng.random((100, 2)))
        labels = np.array([0] * 10 + [1] * 90)
        out = stratified_subsample(samples, labels, 10, seed=1)
        chosen_labels = labels[np.isin(np.arange(100), _chosen_indices(samples, out))]
        assert (chosen_labels == 0).sum() == 5
        assert (chosen_labels == 1).sum() == 5

    def test_deficit_redistribution(self):
        rng = np.random.default_rng(13)
        samples = make_samples(rng.random((100, 2)))
        labels = np.array([0] * 2 + [1] * 98)
        out = stratified_subsample(samples, labels, 10, seed=2)
        chosen_labels = labels[_chosen_indices(samples, out)]
        assert (chosen_labels == 0).sum() == 2
        assert (chosen_labels == 1).sum() == 8

    def test_seeded_reproducible(self):
        rng = np.random.default_rng(14)
        samples = make_samples(rng.random((50, 3)))
        labels = rng.integers(0, 4, size=50)
        a = stratified_subsample(samples, labels, 20, seed=3)
        b = stratified_subsample(samples, labels, 20, seed=3)
        assert np.array_equal(a.vectors, b.vectors)

    def test_quota_rule_property(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            k = int(rng.integers(2, 6))
            sizes = rng.integers(1, 40, size=k)
            n = int(sizes.sum())
            labels = np.repeat(np.arange(k), sizes)
            target = int(rng.integers(1, n + 1))
            samples = make_samples(rng.random((n, 2)))
            out = stratified_subsample(samples, labels, target, seed=int(rng.integers(1000)))
            assert out.n == target
            counts = np.bincount(labels[_chosen_indices(samples, out)], minlength=k)
            quota = target // k
            for j in range(k):
                assert counts[j] <= sizes[j]
                # quota honored up to the deficit rule: small clusters give all
                assert counts[j] >= min(quota, sizes[j])

    def test_target_too_large_rejected(self):
        samples = make_samples(np.zeros((5, 2)))
        with pytest.raises(ValueError, match="exceeds"):
            stratified_subsample(samples, np.zeros(5, int), 6, seed=0)


def _chosen_indices(original, subset):
    # vectors created unique per index via cols field
    return subset.cols.astype(int)


class TestSampleSetIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(16)
        samples = make_samples(rng.random((8, 5)))
        p = tmp_path / "samples.sfg"
        write_sample_set(samples, p)
        back = read_sample_set(p)
        assert np.array_equal(back.vectors, samples.vectors)
        assert np.array_equal(back.rows, samples.rows)
        assert np.array_equal(back.cols, samples.cols)
        assert list(back.scene_ids) == list(samples.scene_ids)
        assert list(back.dates) == list(samples.dates)
