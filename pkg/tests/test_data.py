import numpy as np
import pytest
from PIL import Image as PILImage

from redo.data import (
    disc_mask,
    DatasetSplit,
    LabeledExample,
    export_dataset,
    hsv_color,
    load_exported_dataset,
    load_idx_images,
    load_idx_labels,
    load_image_folder,
    make_blob_toy,
    make_colored_2mnist,
    split_dataset,
    unit_range_to_uint8,
    write_idx_images,
    write_idx_labels,
)


def synthetic_glyphs(rng, count=40):
    """Simple binary glyphs (bars and boxes) with digit labels 0..9."""
    glyphs = np.zeros((count, 28, 28), dtype=np.uint8)
    labels = np.arange(count) % 10
    for i in range(count):
        k = 4 + (i % 7)
        glyphs[i, 6:22, k:k + 6] = 255
        if labels[i] % 2 == 0:
            glyphs[i, 10:14, 4:24] = 255
    return glyphs, labels.astype(np.uint8)


class TestBlobToy:
    def test_examples_valid_and_deterministic(self):
        a = make_blob_toy(10, 32, np.random.default_rng(5))
        b = make_blob_toy(10, 32, np.random.default_rng(5))
        assert len(a) == 10
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.image, eb.image)
            assert np.array_equal(ea.gt_masks, eb.gt_masks)
            assert ea.image.dtype == np.float32
            assert ea.image.min() >= -1 and ea.image.max() <= 1

    def test_disc_area_matches_analytic(self):
        # the rasterizer the toy uses: pixel count tracks pi r^2 within 5%
        # over the whole radius range the generator draws from
        size = 64
        rng = np.random.default_rng(7)
        for _ in range(200):
            radius = rng.uniform(size / 8, size / 3)
            cx = rng.uniform(radius, size - radius)
            cy = rng.uniform(radius, size - radius)
            count = disc_mask(size, cx, cy, radius).sum()
            analytic = np.pi * radius ** 2
            assert abs(count - analytic) / analytic <= 0.05

    def test_hue_ranges_disjoint(self):
        rng = np.random.default_rng(1)
        for ex in make_blob_toy(50, 32, rng):
            disc = ex.gt_masks[0].astype(bool)
            bg = ~disc
            disc_rgb = (ex.image[:, disc].mean(axis=1) + 1) / 2
            bg_rgb = (ex.image[:, bg].mean(axis=1) + 1) / 2
            import colorsys
            dh = colorsys.rgb_to_hsv(*disc_rgb)[0] * 360
            bh = colorsys.rgb_to_hsv(*bg_rgb)[0] * 360
            assert 0 <= dh < 180
            assert 180 <= bh < 360

    def test_gt_masks_one_hot(self):
        for ex in make_blob_toy(20, 32, np.random.default_rng(2)):
            assert ex.gt_masks.shape == (2, 32, 32)
            assert (ex.gt_masks.sum(axis=0) == 1).all()


class TestColored2Digits:
    def setup_method(self):
        self.glyphs, self.labels = synthetic_glyphs(np.random.default_rng(0))

    def test_three_one_hot_regions(self):
        examples = make_colored_2mnist(20, 64, np.random.default_rng(3),
                                       self.glyphs, self.labels)
        assert len(examples) == 20
        for ex in examples:
            assert ex.gt_masks.shape == (3, 64, 64)
            assert (ex.gt_masks.sum(axis=0) == 1).all()

    def test_digit_hue_ranges(self):
        import colorsys
        rng = np.random.default_rng(4)
        examples = make_colored_2mnist(100, 64, rng, self.glyphs, self.labels)
        for ex in examples:
            for region, (lo, hi) in ((0, (0, 120)), (1, (180, 300))):
                sel = ex.gt_masks[region].astype(bool)
                if sel.sum() == 0:
                    continue  # digit fully occluded
                rgb = (ex.image[:, sel].mean(axis=1) + 1) / 2
                hue = colorsys.rgb_to_hsv(*np.clip(rgb, 0, 1))[0] * 360
                assert lo <= hue < hi, (region, hue)

    def test_background_mass_dominates(self):
        # pinned from the first implementation: mean background fraction at
        # size 64 with the standard glyph scale stays near 0.82
        rng = np.random.default_rng(5)
        examples = make_colored_2mnist(200, 64, rng, self.glyphs, self.labels)
        mass = np.mean([ex.gt_masks[2].mean() for ex in examples])
        assert mass >= 0.5

    def test_occlusion_respects_draw_order(self):
        rng = np.random.default_rng(6)
        examples = make_colored_2mnist(200, 64, rng, self.glyphs, self.labels)
        overlapping = sum((ex.gt_masks[:2].sum(axis=0) > 1).any() for ex in examples)
        assert overlapping == 0  # masks record visible pixels only

    def test_determinism(self):
        a = make_colored_2mnist(5, 32, np.random.default_rng(9),
                                self.glyphs, self.labels)
        b = make_colored_2mnist(5, 32, np.random.default_rng(9),
                                self.glyphs, self.labels)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.image, eb.image)

    def test_needs_both_parities(self):
        with pytest.raises(ValueError):
            make_colored_2mnist(1, 32, np.random.default_rng(0),
                                self.glyphs[:1], np.array([2]))


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(7, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, size=7).astype(np.uint8)
        write_idx_images(tmp_path / "img.idx", images)
        write_idx_labels(tmp_path / "lab.idx", labels)
        assert np.array_equal(load_idx_images(tmp_path / "img.idx"), images)
        assert np.array_equal(load_idx_labels(tmp_path / "lab.idx"), labels)

    def test_gzip_supported(self, tmp_path):
        import gzip
        images = np.zeros((2, 4, 4), dtype=np.uint8)
        write_idx_images(tmp_path / "img.idx", images)
        with open(tmp_path / "img.idx", "rb") as f:
            data = f.read()
        with gzip.open(tmp_path / "img.idx.gz", "wb") as f:
            f.write(data)
        assert np.array_equal(load_idx_images(tmp_path / "img.idx.gz"), images)

    def test_wrong_magic(self, tmp_path):
        write_idx_labels(tmp_path / "lab.idx", np.zeros(3, dtype=np.uint8))
        with pytest.raises(ValueError, match="magic"):
            load_idx_images(tmp_path / "lab.idx")

    def test_truncated(self, tmp_path):
        write_idx_images(tmp_path / "img.idx", np.zeros((2, 4, 4), dtype=np.uint8))
        data = (tmp_path / "img.idx").read_bytes()
        (tmp_path / "img.idx").write_bytes(data[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_idx_images(tmp_path / "img.idx")


class TestFolderIngestion:
    def test_short_side_resize_then_crop(self, tmp_path):
        arr = np.zeros((200, 300, 3), dtype=np.uint8)  # H=200, W=300
        PILImage.fromarray(arr).save(tmp_path / "wide.png")
        examples = load_image_folder(tmp_path, 128)
        assert examples[0].image.shape == (3, 128, 128)

    def test_resize_geometry_of_wide_image(self, tmp_path):
        # 300x200 at size 128 resizes to 192x128, then center-crops 128x128:
        # columns [32, 160) of the resized image survive
        arr = np.zeros((200, 300, 3), dtype=np.uint8)
        arr[:, 150:, 0] = 255  # right half red
        PILImage.fromarray(arr).save(tmp_path / "wide.png")
        ex = load_image_folder(tmp_path, 128)[0]
        # after resize the red edge is at column 96; after crop at 96-32=64
        red = ex.image[0] > 0
        assert not red[:, :60].any()
        assert red[:, 68:].all()

    def test_square_input_pure_resize(self, tmp_path):
        arr = np.arange(64 * 64 * 3, dtype=np.uint8).reshape(64, 64, 3)
        PILImage.fromarray(arr).save(tmp_path / "sq.png")
        ex = load_image_folder(tmp_path, 32)[0]
        assert ex.image.shape == (3, 32, 32)

    def test_mask_geometry_matches_image(self, tmp_path):
        # 64x32 input at size 32: no rescale, pure center crop, so the
        # checkerboard survives bit-exactly in both the image and the mask
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        cells = (np.indices((32, 64)).sum(axis=0) // 4) % 2
        img = np.stack([cells * 255] * 3, axis=-1).astype(np.uint8)
        PILImage.fromarray(img).save(tmp_path / "images" / "c.png")
        PILImage.fromarray(cells.astype(np.uint8), mode="L").save(
            tmp_path / "masks" / "c.png")
        ex = load_image_folder(tmp_path / "images", 32,
                               gt_path=tmp_path / "masks")[0]
        img_white = ex.image[0] > 0
        mask_region2 = ex.gt_masks[1].astype(bool)
        assert img_white.any() and not img_white.all()
        assert np.array_equal(img_white, mask_region2)

    def test_binary_255_mask_thresholded(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        PILImage.fromarray(img).save(tmp_path / "images" / "a.png")
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[:16] = 255
        PILImage.fromarray(mask, mode="L").save(tmp_path / "masks" / "a.png")
        ex = load_image_folder(tmp_path / "images", 32,
                               gt_path=tmp_path / "masks")[0]
        assert ex.gt_masks.shape == (2, 32, 32)
        assert ex.gt_masks[0, :16].all()   # object (255) -> region 1
        assert ex.gt_masks[1, 16:].all()   # background -> region 2

    def test_unreadable_file_skipped_with_warning(self, tmp_path):
        PILImage.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(
            tmp_path / "ok.png")
        (tmp_path / "broken.png").write_bytes(b"not a png at all")
        with pytest.warns(UserWarning, match="broken"):
            examples = load_image_folder(tmp_path, 32)
        assert [e.id for e in examples] == ["ok"]

    def test_missing_mask_is_error(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        PILImage.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(
            tmp_path / "images" / "a.png")
        with pytest.raises(FileNotFoundError):
            load_image_folder(tmp_path / "images", 32, gt_path=tmp_path / "masks")

    def test_ingestion_idempotent(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(3):
            arr = rng.integers(0, 256, size=(40, 40, 3)).astype(np.uint8)
            PILImage.fromarray(arr).save(tmp_path / f"im{i}.png")
        a = load_image_folder(tmp_path, 32)
        b = load_image_folder(tmp_path, 32)
        assert [e.id for e in a] == [e.id for e in b]
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.image, eb.image)


class TestExportRoundTrip:
    def test_export_and_reload(self, tmp_path):
        examples = make_blob_toy(6, 32, np.random.default_rng(0))
        split = split_dataset(examples, fractions=(0.5, 0.25, 0.25),
                              rng=np.random.default_rng(1))
        export_dataset(examples, tmp_path, split=split)
        assert (tmp_path / "manifest.csv").exists()
        loaded, lsplit = load_exported_dataset(tmp_path)
        assert len(loaded) == 6
        assert set(lsplit.train) == set(split.train)
        for orig in examples:
            match = next(e for e in loaded if e.id == orig.id)
            assert np.array_equal(match.gt_masks, orig.gt_masks)
            # 8-bit quantization bounds the pixel error
            assert np.abs(match.image - orig.image).max() <= 1 / 127.5

    def test_export_deterministic_bytes(self, tmp_path):
        for d in ("a", "b"):
            examples = make_blob_toy(3, 32, np.random.default_rng(7))
            export_dataset(examples, tmp_path / d)
        for sub in ("images", "masks"):
            for p in sorted((tmp_path / "a" / sub).iterdir()):
                q = tmp_path / "b" / sub / p.name
                assert p.read_bytes() == q.read_bytes()


class TestSplits:
    def _examples(self, count, with_gt=True):
        rng = np.random.default_rng(0)
        out = []
        for i in range(count):
            gt = None
            if with_gt:
                gt = np.zeros((2, 4, 4), dtype=np.uint8)
                gt[1] = 1
            out.append(LabeledExample(
                image=np.zeros((3, 4, 4), dtype=np.float32), gt_masks=gt,
                id=f"e{i:05d}"))
        return out

    def test_flowers_fraction_sizes(self):
        examples = self._examples(8189)
        fr = (6149 / 8189, 1020 / 8189, 1020 / 8189)
        split = split_dataset(examples, fractions=fr, rng=np.random.default_rng(2))
        assert (len(split.train), len(split.val), len(split.test)) == (6149, 1020, 1020)

    def test_degenerate_all_train(self):
        examples = self._examples(10)
        split = split_dataset(examples, fractions=(1.0, 0.0, 0.0),
                              rng=np.random.default_rng(3))
        assert len(split.train) == 10 and not split.val and not split.test

    def test_deterministic(self):
        examples = self._examples(50)
        a = split_dataset(examples, fractions=(0.8, 0.1, 0.1),
                          rng=np.random.default_rng(4))
        b = split_dataset(examples, fractions=(0.8, 0.1, 0.1),
                          rng=np.random.default_rng(4))
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_explicit_lists_must_partition(self):
        examples = self._examples(4)
        ids = [e.id for e in examples]
        split = split_dataset(examples, id_lists=(ids[:2], ids[2:3], ids[3:]))
        assert split.train == ids[:2]
        with pytest.raises(ValueError):
            split_dataset(examples, id_lists=(ids[:3], ids[2:3], ids[3:]))

    def test_overlapping_lists_rejected(self):
        with pytest.raises(ValueError):
            DatasetSplit(train=["a", "b"], val=["b"], test=[])

    def test_val_requires_gt(self):
        examples = self._examples(4, with_gt=False)
        with pytest.raises(ValueError, match="ground-truth"):
            split_dataset(examples, fractions=(0.5, 0.5, 0.0),
                          rng=np.random.default_rng(5))

    def test_either_fractions_or_lists(self):
        examples = self._examples(4)
        with pytest.raises(ValueError):
            split_dataset(examples)


class TestInvariants:
    def test_images_in_unit_range(self):
        for ex in make_blob_toy(5, 32, np.random.default_rng(0)):
            assert ex.image.min() >= -1 and ex.image.max() <= 1

    def test_round_trip_uint8(self):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, size=(3, 8, 8)) / 127.5 - 1).astype(np.float32)
        again = unit_range_to_uint8(img)
        assert again.shape == (8, 8, 3)

    def test_labeled_example_validates_one_hot(self):
        bad = np.zeros((2, 4, 4), dtype=np.uint8)
        with pytest.raises(ValueError):
            LabeledExample(image=np.zeros((3, 4, 4), dtype=np.float32),
                           gt_masks=bad, id="x")

    def test_hsv_color_range(self):
        for h, s, v in [(0, 1, 1), (359, 0.5, 0.5), (180, 0, 0.2)]:
            c = hsv_color(h, s, v)
            assert c.shape == (3,)
            assert c.min() >= -1 and c.max() <= 1
