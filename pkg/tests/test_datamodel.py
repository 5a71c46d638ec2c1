import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from agsp.datamodel import (ClassTaxonomy, DatasetError, Sample, compute_dist, concat_nir,
                            generate_synthetic, load_dataset, write_sample, write_stats, write_taxonomy)


def _write_mask_dataset(root, masks, names=("bg", "a", "b")):
    write_taxonomy(root, ClassTaxonomy(names))
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=np.int64)
        h, w = m.shape
        write_sample(root, Sample(f"s{i}", np.zeros((3, h, w)), m))


class TestTaxonomy:
    def test_rejects_duplicates_and_short(self):
        with pytest.raises(DatasetError):
            ClassTaxonomy(("a", "a"))
        with pytest.raises(DatasetError):
            ClassTaxonomy(("only",))
        with pytest.raises(DatasetError):
            ClassTaxonomy(("a", "b"), background_id=2)


class TestLoad:
    def test_single_class_counts(self, tmp_path):
        _write_mask_dataset(tmp_path, [np.zeros((4, 4))] * 2)
        ds = load_dataset(tmp_path)
        assert ds.index.pixel_counts.tolist() == [32, 0, 0]
        assert ds.index.per_class_members == {0: ["s0", "s1"], 1: [], 2: []}

    def test_label_out_of_range(self, tmp_path):
        _write_mask_dataset(tmp_path, [np.full((4, 4), 3)])
        with pytest.raises(DatasetError, match="label out of range"):
            load_dataset(tmp_path)

    def test_missing_labels(self, tmp_path):
        _write_mask_dataset(tmp_path, [np.zeros((4, 4))])
        (tmp_path / "labels" / "s0.png").unlink()
        with pytest.raises(DatasetError, match="s0_rgb.png"):
            load_dataset(tmp_path)

    def test_dimension_mismatch(self, tmp_path):
        _write_mask_dataset(tmp_path, [np.zeros((4, 4))])
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "s0_rgb.png")
        ds = load_dataset(tmp_path)
        with pytest.raises(DatasetError, match="dimension mismatch"):
            ds.load("s0")

    def test_stride_enforced(self, tmp_path):
        _write_mask_dataset(tmp_path, [np.zeros((6, 6))])
        with pytest.raises(DatasetError, match="stride"):
            load_dataset(tmp_path, stride=4)

    def test_invalid_pixels_excluded(self, tmp_path):
        _write_mask_dataset(tmp_path, [[[0, 1], [2, 2]]])
        (tmp_path / "valid").mkdir()
        Image.fromarray(np.array([[255, 0], [255, 255]], np.uint8)).save(tmp_path / "valid" / "s0.png")
        ds = load_dataset(tmp_path)
        assert ds.index.pixel_counts.tolist() == [1, 0, 2]
        assert ds.index.per_class_members[1] == []

    def test_membership_matches_rescan(self, synth_small):
        root, _ = synth_small
        ds = load_dataset(root)
        for c in range(3):
            expected = [sid for sid in ds.ids if np.any(ds.labels(sid) == c)]
            assert ds.index.per_class_members[c] == expected
        assert ds.index.pixel_counts.sum() == sum(ds.labels(s).size for s in ds.ids)

    def test_write_load_identity(self, synth_small, tmp_path):
        root, _ = synth_small
        ds = load_dataset(root)
        for sid in ds.ids[:5]:
            write_sample(tmp_path, ds.load(sid))
        write_taxonomy(tmp_path, ds.taxonomy)
        again = load_dataset(tmp_path)
        for sid in ds.ids[:5]:
            a, b = ds.load(sid), again.load(sid)
            assert np.array_equal(a.rgb, b.rgb)
            assert np.array_equal(a.nir, b.nir)
            assert np.array_equal(a.labels, b.labels)


class TestDist:
    def test_minmax_example(self):
        d = compute_dist([900, 90, 10])
        assert d.tolist() == pytest.approx([1.0, 80 / 890, 0.0], abs=1e-15)
        assert d[1] == pytest.approx(0.0899, abs=1e-4)

    def test_two_point(self):
        assert compute_dist([0, 100]).tolist() == [0.0, 1.0]

    def test_degenerate_warns(self):
        with pytest.warns(RuntimeWarning):
            d = compute_dist([5, 5, 5])
        assert d.tolist() == [0.5, 0.5, 0.5]

    @given(st.lists(st.integers(0, 10**6), min_size=2, max_size=9), st.integers(1, 1000))
    def test_scale_invariant(self, counts, k):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = compute_dist(counts)
            b = compute_dist([k * c for c in counts])
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_order_invariant(self, synth_small):
        root, _ = synth_small
        ds = load_dataset(root)
        rev = ds.subset_index(list(reversed(ds.ids)))
        assert np.array_equal(compute_dist(rev), compute_dist(ds.index))

    def test_stats_file(self, synth_small, tmp_path):
        root, _ = synth_small
        ds = load_dataset(root)
        write_stats(ds.index, tmp_path / "a.json")
        write_stats(ds.index, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        stats = json.loads((tmp_path / "a.json").read_text())
        assert set(stats) == {"pixel_counts", "dist", "per_class_members"}


class TestConcatNir:
    def test_channels(self):
        rng = np.random.default_rng(0)
        s = Sample("x", rng.random((3, 8, 8)), np.zeros((8, 8), np.int64), rng.random((1, 8, 8)))
        x = concat_nir(s)
        assert x.shape == (4, 8, 8)
        assert np.array_equal(x[3], s.nir[0])
        assert np.array_equal(x[:3], s.rgb)

    def test_missing_nir(self):
        s = Sample("x", np.zeros((3, 4, 4)), np.zeros((4, 4), np.int64))
        with pytest.raises(DatasetError, match="RGB-only"):
            concat_nir(s)


class TestSynthetic:
    def test_empty(self, tmp_path):
        counts = generate_synthetic(tmp_path, 0, 16, [0.5, 0.5], seed=0)
        assert counts.tolist() == [0, 0]
        ds = load_dataset(tmp_path)
        assert len(ds) == 0
        assert ds.index.pixel_counts.tolist() == [0, 0]

    def test_deterministic(self, tmp_path):
        generate_synthetic(tmp_path / "a", 3, 16, [0.8, 0.2], seed=5)
        generate_synthetic(tmp_path / "b", 3, 16, [0.8, 0.2], seed=5)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_round_trip_counts(self, tmp_path):
        counts = generate_synthetic(tmp_path, 3, 32, [0.9, 0.08, 0.02], seed=1)
        assert load_dataset(tmp_path).index.pixel_counts.tolist() == counts.tolist()

    def test_frequencies(self, tmp_path):
        freqs = np.array([0.90, 0.08, 0.02])
        generate_synthetic(tmp_path, 200, 64, freqs, seed=1)
        counts = load_dataset(tmp_path).index.pixel_counts
        achieved = counts / counts.sum()
        assert np.all(np.abs(achieved - freqs) <= 0.2 * freqs)

    def test_has_nir(self, synth_small):
        root, _ = synth_small
        ds = load_dataset(root)
        assert ds.load(ds.ids[0]).nir is not None

    @pytest.mark.parametrize("freqs", [[1.0], [0.5, 0.6], [-0.1, 1.1]])
    def test_bad_freqs(self, tmp_path, freqs):
        with pytest.raises(DatasetError):
            generate_synthetic(tmp_path, 1, 16, freqs, seed=0)

    def test_size_must_match_stride(self, tmp_path):
        with pytest.raises(DatasetError):
            generate_synthetic(tmp_path, 1, 18, [0.5, 0.5], seed=0)
