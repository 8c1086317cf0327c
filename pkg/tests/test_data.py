import numpy as np
import pytest

from harmerge.data import (
    Batch,
    Dataset,
    DomainSpec,
    batch_iter,
    generate,
    load_csv,
    save_csv,
    split_train_val,
)
from harmerge.errors import ConfigError, DataFormatError


def two_domain_specs(**overrides):
    base = dict(rotation_angle=0.0, scale=1.0, offset=0.0,
                feature_noise_std=0.3, label_noise_rate=0.0)
    base.update(overrides)
    return [DomainSpec(domain_id=0, **base), DomainSpec(domain_id=1, **base)]


class TestDomainSpec:
    def test_rejects_bad_scale(self):
        with pytest.raises(ConfigError):
            DomainSpec(domain_id=0, scale=0.0)

    def test_rejects_bad_noise_rate(self):
        with pytest.raises(ConfigError):
            DomainSpec(domain_id=0, label_noise_rate=1.0)

    def test_offset_broadcast_and_vector(self):
        spec = DomainSpec(domain_id=0, offset=0.5)
        np.testing.assert_array_equal(spec.offset_vector(3), [0.5, 0.5, 0.5])
        spec = DomainSpec(domain_id=0, offset=(1.0, 2.0))
        np.testing.assert_array_equal(spec.offset_vector(2), [1.0, 2.0])
        with pytest.raises(ConfigError):
            spec.offset_vector(3)


class TestGenerate:
    def test_no_noise_no_corruption(self):
        ds = generate(3, 4, 30, two_domain_specs(), seed=0)
        assert not ds.corrupted.any()

    def test_label_noise_marks_corrupted(self):
        ds = generate(3, 4, 300, two_domain_specs(label_noise_rate=0.4), seed=0)
        frac = ds.corrupted.mean()
        assert 0.3 < frac < 0.5

    def test_corrupted_labels_differ_from_clean_majority(self):
        # flipping moves the label to a different class than the generative one
        specs = [DomainSpec(domain_id=0, label_noise_rate=0.5, feature_noise_std=0.01)]
        ds = generate(3, 4, 300, specs, seed=1)
        clean = ds.subset(np.where(~ds.corrupted)[0])
        bad = ds.subset(np.where(ds.corrupted)[0])
        # nearest clean-class centroid disagrees with the stored label
        centroids = {k: clean.x[clean.y == k].mean(axis=0) for k in range(3)}
        for i in range(len(bad)):
            dists = {k: np.linalg.norm(bad.x[i] - c) for k, c in centroids.items()}
            assert min(dists, key=dists.get) != bad.y[i]

    def test_identical_specs_give_identical_conditional_distributions(self):
        ds = generate(4, 6, 500, two_domain_specs(), seed=7)
        d0 = ds.restrict([0])
        d1 = ds.restrict([1])
        n = len(d0)
        sigma = ds.x.std(axis=0)
        diff = np.abs(d0.x.mean(axis=0) - d1.x.mean(axis=0))
        assert np.all(diff < 3.0 * sigma / np.sqrt(n))

    def test_deterministic(self):
        specs = two_domain_specs(label_noise_rate=0.2)
        a = generate(3, 4, 50, specs, seed=5)
        b = generate(3, 4, 50, specs, seed=5)
        assert a.equals(b)
        c = generate(3, 4, 50, specs, seed=6)
        assert not a.equals(c)

    def test_per_domain_counts(self):
        ds = generate(3, 4, 40, two_domain_specs(), seed=0)
        assert len(ds) == 80
        assert np.count_nonzero(ds.domain_id == 0) == 40

    def test_labels_balanced(self):
        ds = generate(4, 4, 100, two_domain_specs(), seed=0)
        d0 = ds.restrict([0])
        counts = np.bincount(d0.y, minlength=4)
        assert counts.min() == counts.max() == 25

    def test_rejects_bad_args(self):
        with pytest.raises(ConfigError):
            generate(1, 4, 10, two_domain_specs(), seed=0)
        with pytest.raises(ConfigError):
            generate(5, 4, 3, two_domain_specs(), seed=0)

    def test_class_centers_separated(self):
        ds = generate(5, 6, 100, two_domain_specs(feature_noise_std=0.0), seed=3)
        d0 = ds.restrict([0])
        for a in range(5):
            for b in range(a + 1, 5):
                xa = d0.x[d0.y == a][0]
                xb = d0.x[d0.y == b][0]
                assert np.linalg.norm(xa - xb) >= 2.0 - 1e-9


class TestSplit:
    def test_80_20_per_domain(self):
        ds = generate(4, 4, 100, two_domain_specs(), seed=0)
        pair = split_train_val(ds, seed=1)
        for d in (0, 1):
            assert np.count_nonzero(pair.train.domain_id == d) == 80
            assert np.count_nonzero(pair.val.domain_id == d) == 20

    def test_union_is_partition(self):
        ds = generate(3, 4, 50, two_domain_specs(), seed=2)
        pair = split_train_val(ds, seed=3)
        merged = np.concatenate([pair.train.x, pair.val.x])
        assert sorted(map(tuple, merged)) == sorted(map(tuple, ds.x))
        assert len(pair.train) + len(pair.val) == len(ds)

    def test_deterministic(self):
        ds = generate(3, 4, 50, two_domain_specs(), seed=2)
        a = split_train_val(ds, seed=9)
        b = split_train_val(ds, seed=9)
        assert a.train.equals(b.train) and a.val.equals(b.val)

    def test_ratio_floor_or_ceil(self):
        specs = two_domain_specs()
        ds = generate(3, 4, 33, specs, seed=0)
        pair = split_train_val(ds, seed=0)
        n_val = np.count_nonzero(pair.val.domain_id == 0)
        assert n_val in (6, 7)  # floor/ceil of 6.6

    def test_too_small_domain_raises(self):
        ds = generate(3, 4, 4, [DomainSpec(domain_id=0)], seed=0)
        with pytest.raises(ConfigError):
            split_train_val(ds, seed=0)


class TestBatchIter:
    def test_batch_sizes_last_short_kept(self):
        ds = generate(2, 4, 50, [DomainSpec(domain_id=0)], seed=0)
        sizes = [len(b) for b in batch_iter(ds, 24, seed=0, epoch=0)]
        assert sizes == [24, 24, 2]

    def test_epoch_changes_permutation_same_multiset(self):
        ds = generate(2, 4, 30, [DomainSpec(domain_id=0)], seed=0)
        e0 = np.concatenate([b.y for b in batch_iter(ds, 8, seed=0, epoch=0)])
        e1 = np.concatenate([b.y for b in batch_iter(ds, 8, seed=0, epoch=1)])
        assert not np.array_equal(e0, e1)
        assert sorted(e0) == sorted(e1)

    def test_same_seed_epoch_identical(self):
        ds = generate(2, 4, 30, [DomainSpec(domain_id=0)], seed=0)
        a = [b.x for b in batch_iter(ds, 8, seed=5, epoch=3)]
        b = [b.x for b in batch_iter(ds, 8, seed=5, epoch=3)]
        for xa, xb in zip(a, b):
            assert np.array_equal(xa, xb)

    def test_batch_concat(self):
        a = Batch(np.ones((2, 3)), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))
        b = Batch(np.zeros((1, 3)), np.ones(1, dtype=int), np.ones(1, dtype=bool))
        out = Batch.concat([a, b])
        assert len(out) == 3
        assert out.corrupted.tolist() == [False, False, True]


class TestCsvIO:
    def test_round_trip(self, tmp_path):
        ds = generate(3, 4, 3, [DomainSpec(domain_id=0, label_noise_rate=0.3)], seed=4)
        path = tmp_path / "ds.csv"
        save_csv(ds, path)
        assert load_csv(path, n_classes=3).equals(
            Dataset(ds.x, ds.y, ds.domain_id, ds.corrupted, 3)
        )

    def test_large_round_trip_bit_exact(self, tmp_path):
        ds = generate(5, 6, 2000, two_domain_specs(label_noise_rate=0.1), seed=8)
        assert len(ds) >= 10**4 / 4
        path = tmp_path / "big.csv"
        save_csv(ds, path)
        back = load_csv(path, n_classes=5)
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.corrupted, ds.corrupted)

    def test_missing_column_raises_with_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,y,domain_id,corrupted\n1.0,2.0,0,0\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(path)

    def test_bad_header_raises(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(DataFormatError, match="line 1"):
            load_csv(path)

    def test_non_numeric_raises_with_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,y,domain_id,corrupted\n1.0,0,0,0\nfoo,1,0,0\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_csv(path)
