import numpy as np
import pytest
from scipy import stats

from svrn.data import (AugmentConfig, SampleRecord, SynthConfig, augment,
                       background_sampling_mask, boundary_sampling_mask,
                       generate_synthetic, load_dataset, save_dataset)
from svrn.vocab import IGNORE_LABEL, MIRROR_SWAP_FINE

IDENTITY_AUG = AugmentConfig(rotate_deg=0.0, scale_lo=1.0, scale_hi=1.0,
                             translate_frac=0.0, mirror_prob=0.0)
MIRROR_ONLY = AugmentConfig(rotate_deg=0.0, scale_lo=1.0, scale_hi=1.0,
                            translate_frac=0.0, mirror_prob=1.0,
                            swap_pairs=MIRROR_SWAP_FINE)


class TestGenerator:
    def test_coarse_class_shares(self):
        cfg = SynthConfig(seed=11, count=10, height=64, width=64, clutter=0.0)
        for rec in generate_synthetic(cfg):
            counts = np.bincount(rec.labels.ravel(), minlength=3)
            assert counts[0] > counts[1] > counts[2] > 0

    def test_determinism(self):
        cfg = SynthConfig(seed=5, count=6, height=48, width=48, clutter=0.7)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.labels, rb.labels)
            np.testing.assert_array_equal(ra.centers, rb.centers)

    def test_fine_eye_share_small(self):
        cfg = SynthConfig(seed=2, count=100, height=128, width=128,
                          vocabulary="fine", clutter=0.3)
        shares = []
        for rec in generate_synthetic(cfg):
            eyes = np.isin(rec.labels, (4, 5)).mean()
            shares.append(eyes)
        assert np.mean(shares) < 0.02

    def test_fine_components_present(self):
        cfg = SynthConfig(seed=4, count=10, height=128, width=128,
                          vocabulary="fine", clutter=0.0)
        for rec in generate_synthetic(cfg):
            present = set(np.unique(rec.labels))
            assert {0, 1, 2, 3, 4, 5, 6, 7, 9, 10} <= present

    def test_centers_inside_components(self):
        cfg = SynthConfig(seed=9, count=20, height=128, width=128,
                          vocabulary="fine", clutter=0.2)
        for rec in generate_synthetic(cfg):
            ex, ey = rec.centers[0]
            assert rec.labels[int(round(ey)), int(round(ex))] in (1, 4)

    def test_multi_face(self):
        cfg = SynthConfig(seed=3, count=2, height=512, width=512,
                          multi_face=True, faces_min=2, faces_max=4)
        for rec in generate_synthetic(cfg):
            assert rec.labels.shape == (512, 512)
            assert rec.centers is None
            counts = np.bincount(rec.labels.ravel(), minlength=3)
            assert counts[1] > 0 and counts[2] > 0
            # zero padding stays background
            assert counts[0] > counts[1]

    def test_multi_face_requires_coarse(self):
        with pytest.raises(ValueError):
            SynthConfig(multi_face=True, vocabulary="fine")


class TestAugment:
    def test_identity_parameters_unchanged(self, rng):
        rec = generate_synthetic(SynthConfig(seed=1, count=1))[0]
        out = augment(rec, rng, IDENTITY_AUG)
        np.testing.assert_array_equal(out.image, rec.image)
        np.testing.assert_array_equal(out.labels, rec.labels)
        np.testing.assert_array_equal(out.centers, rec.centers)

    def test_mirror_twice_identity(self, rng):
        cfg = SynthConfig(seed=8, count=1, height=96, width=96, vocabulary="fine")
        rec = generate_synthetic(cfg)[0]
        twice = augment(augment(rec, rng, MIRROR_ONLY), rng, MIRROR_ONLY)
        np.testing.assert_array_equal(twice.labels, rec.labels)
        np.testing.assert_array_equal(twice.image, rec.image)
        np.testing.assert_allclose(twice.centers, rec.centers)

    def test_mirror_swaps_sides(self, rng):
        cfg = SynthConfig(seed=8, count=1, height=96, width=96, vocabulary="fine")
        rec = generate_synthetic(cfg)[0]
        out = augment(rec, rng, MIRROR_ONLY)
        assert np.isin(out.labels, 4).sum() == np.isin(rec.labels, 5).sum()
        assert out.centers[0, 0] == pytest.approx(95 - rec.centers[1, 0])

    def test_vocabulary_preserved(self, rng):
        cfg = SynthConfig(seed=6, count=4, height=64, width=64, vocabulary="fine")
        aug_cfg = AugmentConfig(swap_pairs=MIRROR_SWAP_FINE)
        for rec in generate_synthetic(cfg):
            out = augment(rec, rng, aug_cfg)
            ids = set(np.unique(out.labels)) - {IGNORE_LABEL}
            assert ids <= set(range(11))

    def test_out_of_view_marked_ignore(self, rng):
        rec = generate_synthetic(SynthConfig(seed=1, count=1))[0]
        shifted = AugmentConfig(rotate_deg=0.0, scale_lo=1.0, scale_hi=1.0,
                                translate_frac=0.4, mirror_prob=0.0)
        out = augment(rec, rng, shifted)
        assert (out.labels == IGNORE_LABEL).any()

    def test_center_stays_on_component(self):
        # transformed center must keep landing inside its transformed region
        cfg = SynthConfig(seed=12, count=25, height=128, width=128,
                          vocabulary="fine", clutter=0.0)
        rng = np.random.default_rng(0)
        hits = total = 0
        for rec in generate_synthetic(cfg):
            out = augment(rec, rng, AugmentConfig(swap_pairs=MIRROR_SWAP_FINE))
            for pt, ok_ids in (((out.centers[0]), (4, 1)),    # eye (or lid skin)
                               ((out.centers[2]), (6, 1))):   # nose tip
                x, y = int(round(pt[0])), int(round(pt[1]))
                lab = out.labels[y, x]
                total += 1
                if lab in ok_ids or lab == IGNORE_LABEL:
                    hits += 1
        assert hits / total >= 0.99


class TestBoundarySamplingMask:
    def test_ratio(self, rng):
        gt = np.ones((200, 52), dtype=np.uint8)
        gt.ravel()[rng.choice(gt.size, 100, replace=False)] = 0
        mask = boundary_sampling_mask(gt, 5, rng)
        assert mask[gt == 0].sum() == 100
        assert mask[gt == 1].sum() == 500

    def test_all_boundary_keeps_everything(self, rng):
        gt = np.zeros((8, 8), dtype=np.uint8)
        assert (boundary_sampling_mask(gt, 5, rng) == 1).all()

    def test_no_boundary_empty(self, rng):
        gt = np.ones((8, 8), dtype=np.uint8)
        assert not boundary_sampling_mask(gt, 5, rng).any()

    def test_uniform_selection(self):
        # chi-square over which candidates get chosen across 1000 draws
        gt = np.ones((20, 20), dtype=np.uint8)
        gt[0, :4] = 0                     # 4 boundary pixels -> 20 sampled
        counts = np.zeros(gt.size)
        rng = np.random.default_rng(77)
        draws = 1000
        for _ in range(draws):
            m = boundary_sampling_mask(gt, 5, rng)
            counts += (m.ravel() == 1)
        cand = (gt == 1).ravel()
        observed = counts[cand]
        expected = draws * 20 / cand.sum()
        chi2 = ((observed - expected) ** 2 / expected).sum()
        p = stats.chi2.sf(chi2, df=cand.sum() - 1)
        assert p > 0.01


class TestBackgroundSamplingMask:
    def test_factor(self, rng):
        lab = np.zeros((500, 500), dtype=np.uint8)
        lab.ravel()[rng.choice(lab.size, 1000, replace=False)] = 1
        mask = background_sampling_mask(lab, 5, rng)
        assert mask[lab != 0].sum() == 1000
        assert mask[lab == 0].sum() == 5000

    def test_small_background_keeps_all(self, rng):
        lab = np.ones((10, 10), dtype=np.uint8)
        lab[0, 0] = 0
        assert (background_sampling_mask(lab, 5, rng) == 1).all()

    def test_no_foreground_warns_and_skips(self, rng, caplog):
        lab = np.zeros((8, 8), dtype=np.uint8)
        with caplog.at_level("WARNING"):
            mask = background_sampling_mask(lab, 5, rng)
        assert not mask.any()
        assert "skipped" in caplog.text


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        cfg = SynthConfig(seed=20, count=4, height=32, width=32,
                          vocabulary="fine", clutter=0.4)
        records = generate_synthetic(cfg)
        save_dataset(tmp_path / "ds", records, palette="fine")
        back = load_dataset(tmp_path / "ds", num_classes=11)
        assert len(back) == len(records)
        for ra, rb in zip(records, back):
            np.testing.assert_array_equal(rb.labels, ra.labels)
            assert np.abs(rb.image - ra.image).max() <= 0.5 / 255 + 1e-6
            np.testing.assert_allclose(rb.centers, ra.centers, atol=1e-3)

    def test_missing_label_named(self, tmp_path):
        records = generate_synthetic(SynthConfig(seed=1, count=2, height=16,
                                                 width=16))
        save_dataset(tmp_path / "ds", records)
        (tmp_path / "ds" / "labels" / "0001.png").unlink()
        with pytest.raises(FileNotFoundError, match="0001"):
            load_dataset(tmp_path / "ds")

    def test_extent_mismatch_named(self, tmp_path):
        records = generate_synthetic(SynthConfig(seed=1, count=1, height=16,
                                                 width=16))
        save_dataset(tmp_path / "ds", records)
        from svrn.data import labels_to_png
        labels_to_png(np.zeros((8, 8), dtype=np.uint8),
                      tmp_path / "ds" / "labels" / "0000.png")
        with pytest.raises(ValueError, match="0000"):
            load_dataset(tmp_path / "ds")

    def test_vocab_violation_named(self, tmp_path):
        rec = generate_synthetic(SynthConfig(seed=1, count=1, height=16,
                                             width=16))[0]
        rec.labels[0, 0] = 9
        save_dataset(tmp_path / "ds", [rec])
        with pytest.raises(ValueError, match="label id 9"):
            load_dataset(tmp_path / "ds", num_classes=3)

    def test_ignore_marker_roundtrip(self, tmp_path):
        rec = generate_synthetic(SynthConfig(seed=1, count=1, height=16,
                                             width=16))[0]
        rec.labels[2, 3] = 255
        save_dataset(tmp_path / "ds", [rec])
        back = load_dataset(tmp_path / "ds", num_classes=3)[0]
        assert back.labels[2, 3] == IGNORE_LABEL
