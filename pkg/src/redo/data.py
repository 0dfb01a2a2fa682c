"""Datasets: synthetic toys (colored two-digit scenes, colored blobs),
IDX digit-file ingestion, image-folder loading with the standard
short-side-resize + center-crop preprocessing, and deterministic splits.

Images are float32 (C, H, W) in [-1, 1]; ground-truth masks are one-hot
uint8 (n, H, W) with the background always the last region. On disk a mask
is a single-channel PNG whose pixel value v encodes region id v+1 (so the
background of an n-region dataset is the value n-1).
"""

from __future__ import annotations

import colorsys
import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class LabeledExample:
    image: np.ndarray                      # float32 (C, H, W) in [-1, 1]
    gt_masks: np.ndarray | None            # uint8 one-hot (n, H, W) or None
    id: str

    def __post_init__(self):
        if self.gt_masks is not None:
            m = self.gt_masks
            if not ((m == 0) | (m == 1)).all():
                raise ValueError(f"{self.id}: gt mask entries must be exactly 0 or 1")
            if not (m.sum(axis=0) == 1).all():
                raise ValueError(f"{self.id}: gt masks must sum to 1 at every pixel")


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for part in (self.train, self.val, self.test):
            for i in part:
                if i in seen:
                    raise ValueError(f"example id {i!r} appears in more than one split")
                seen.add(i)

    def part(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# color helpers
# ---------------------------------------------------------------------------

def hsv_color(hue_deg: float, sat: float, val: float) -> np.ndarray:
    """RGB color in [-1, 1] from hue (degrees), saturation, value."""
    r, g, b = colorsys.hsv_to_rgb((hue_deg % 360.0) / 360.0, sat, val)
    return np.array([r, g, b], dtype=np.float32) * 2 - 1

# Disjoint hue ranges (degrees) keep region appearance distributions separable.
BLOB_OBJECT_HUE = (0.0, 180.0)
BLOB_BACKGROUND_HUE = (180.0, 360.0)
ODD_DIGIT_HUE = (0.0, 120.0)
EVEN_DIGIT_HUE = (180.0, 300.0)
BACKGROUND_MAX_SAT = 0.2


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


# ---------------------------------------------------------------------------
# blob toy
# ---------------------------------------------------------------------------

def disc_mask(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean raster of a filled disc, sampled at pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= radius ** 2


def make_blob_toy(count: int, size: int, rng: np.random.Generator) -> list[LabeledExample]:
    """Two-region toy scenes: one filled disc on a solid background.

    Disc hue in [0, 180), background hue in [180, 360); radius uniform in
    [size/8, size/3]; discs lie fully inside the frame. Ground truth is the
    rasterized disc as region 1, background as region 2.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    examples = []
    for idx in range(max(count, 0)):
        bg = hsv_color(_uniform(rng, *BLOB_BACKGROUND_HUE),
                       _uniform(rng, 0.55, 0.95), _uniform(rng, 0.55, 0.95))
        fg = hsv_color(_uniform(rng, *BLOB_OBJECT_HUE),
                       _uniform(rng, 0.55, 0.95), _uniform(rng, 0.55, 0.95))
        radius = _uniform(rng, size / 8, size / 3)
        cx = _uniform(rng, radius, size - radius)
        cy = _uniform(rng, radius, size - radius)
        inside = disc_mask(size, cx, cy, radius)
        image = np.where(inside[None], fg[:, None, None], bg[:, None, None])
        gt = np.stack([inside, ~inside]).astype(np.uint8)
        examples.append(LabeledExample(image=image.astype(np.float32), gt_masks=gt,
                                       id=f"blob_{idx:06d}"))
    return examples


# ---------------------------------------------------------------------------
# colored two-digit scenes
# ---------------------------------------------------------------------------

def _scale_glyph(glyph: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize of a [0,1] glyph, then binarize at 0.5."""
    src = glyph.shape[0]
    idx = (np.arange(side) * src) // side
    return (glyph[np.ix_(idx, idx)] >= 0.5)


def make_colored_2mnist(count: int, size: int, rng: np.random.Generator,
                        glyphs: np.ndarray, labels: np.ndarray) -> list[LabeledExample]:
    """Scenes with one odd and one even digit on a uniform background.

    ``glyphs`` is (N, 28, 28) in [0, 1] (or uint8 0..255) with digit labels.
    Odd digits are tinted with hues in [0, 120), even digits in [180, 300);
    the background is a random low-saturation color. Digits are placed
    uniformly at random and may overlap; the later-drawn digit occludes, and
    ground truth records visible pixels only (region 1 = odd, 2 = even,
    3 = background).
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    glyphs = np.asarray(glyphs)
    if glyphs.dtype != np.float32 and glyphs.dtype != np.float64:
        glyphs = glyphs.astype(np.float32) / 255.0
    labels = np.asarray(labels).astype(np.int64)
    odd_pool = np.flatnonzero(labels % 2 == 1)
    even_pool = np.flatnonzero(labels % 2 == 0)
    if len(odd_pool) == 0 or len(even_pool) == 0:
        raise ValueError("need at least one odd and one even glyph")

    side = max(8, round(28 * size / 64))
    examples = []
    for idx in range(max(count, 0)):
        bg = hsv_color(_uniform(rng, 0, 360), _uniform(rng, 0, BACKGROUND_MAX_SAT),
                       _uniform(rng, 0.35, 0.95))
        image = np.tile(bg[:, None, None], (1, size, size)).astype(np.float32)
        owner = np.full((size, size), 2, dtype=np.uint8)  # 0=odd, 1=even, 2=bg

        odd_glyph = _scale_glyph(glyphs[rng.choice(odd_pool)], side)
        even_glyph = _scale_glyph(glyphs[rng.choice(even_pool)], side)
        odd_color = hsv_color(_uniform(rng, *ODD_DIGIT_HUE),
                              _uniform(rng, 0.6, 1.0), _uniform(rng, 0.6, 1.0))
        even_color = hsv_color(_uniform(rng, *EVEN_DIGIT_HUE),
                               _uniform(rng, 0.6, 1.0), _uniform(rng, 0.6, 1.0))

        order = [(0, odd_glyph, odd_color), (1, even_glyph, even_color)]
        if rng.integers(2):
            order.reverse()
        for region, glyph, color in order:
            y0 = int(rng.integers(0, size - side + 1))
            x0 = int(rng.integers(0, size - side + 1))
            patch = owner[y0:y0 + side, x0:x0 + side]
            patch[glyph] = region
            img_patch = image[:, y0:y0 + side, x0:x0 + side]
            img_patch[:, glyph] = color[:, None]

        gt = np.stack([owner == 0, owner == 1, owner == 2]).astype(np.uint8)
        examples.append(LabeledExample(image=image, gt_masks=gt,
                                       id=f"c2m_{idx:06d}"))
    return examples


# ---------------------------------------------------------------------------
# IDX digit files
# ---------------------------------------------------------------------------

def _idx_open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _idx_magic(f, path, expected: int) -> None:
    head = f.read(4)
    if len(head) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", head)
    if magic != expected:
        raise ValueError(f"{path}: expected IDX magic {expected}, got {magic}")


def load_idx_images(path) -> np.ndarray:
    """Read a big-endian IDX image file (magic 2051) into (N, rows, cols) uint8."""
    with _idx_open(path) as f:
        _idx_magic(f, path, IDX_IMAGES_MAGIC)
        n, rows, cols = struct.unpack(">III", f.read(12))
        data = f.read(n * rows * cols)
    if len(data) != n * rows * cols:
        raise ValueError(f"{path}: truncated image data")
    return np.frombuffer(data, dtype=np.uint8).reshape(n, rows, cols).copy()


def load_idx_labels(path) -> np.ndarray:
    """Read a big-endian IDX label file (magic 2049) into (N,) uint8."""
    with _idx_open(path) as f:
        _idx_magic(f, path, IDX_LABELS_MAGIC)
        (n,) = struct.unpack(">I", f.read(4))
        data = f.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated label data")
    return np.frombuffer(data, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# folder ingestion and export
# ---------------------------------------------------------------------------

def image_to_unit_range(arr: np.ndarray) -> np.ndarray:
    """uint8 (H, W, C) -> float32 (C, H, W) in [-1, 1]."""
    return (arr.astype(np.float32) / 127.5 - 1).transpose(2, 0, 1)


def unit_range_to_uint8(img: np.ndarray) -> np.ndarray:
    """float32 (C, H, W) in [-1, 1] -> uint8 (H, W, C)."""
    arr = np.clip((img + 1) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def _resize_short_side(im: PILImage.Image, size: int, resample) -> PILImage.Image:
    w, h = im.size
    if w <= h:
        new = (size, max(size, round(h * size / w)))
    else:
        new = (max(size, round(w * size / h)), size)
    return im.resize(new, resample=resample)


def _center_crop(im: PILImage.Image, size: int) -> PILImage.Image:
    w, h = im.size
    left = (w - size) // 2
    top = (h - size) // 2
    return im.crop((left, top, left + size, top + size))


MAX_REGION_ID = 31  # single-channel values above this are read as grayscale


def _mask_to_labels(arr: np.ndarray) -> np.ndarray:
    """Mask PNG values -> region labels. Small values are region ids; anything
    else is treated as a grayscale object mask thresholded at 0.5 (object ->
    region 1 / label 0, background -> label 1)."""
    if arr.max() <= MAX_REGION_ID:
        return arr.astype(np.uint8)
    binary = arr.astype(np.float32) / 255.0 >= 0.5
    return np.where(binary, 0, 1).astype(np.uint8)


def load_image_folder(path, size: int, gt_path=None) -> list[LabeledExample]:
    """Load a folder of images (short-side resize to ``size``, center crop,
    [-1, 1] normalization), optionally paired with a mask folder matched by
    file stem. Masks get the identical geometry with nearest-neighbor
    resampling. Unreadable images are skipped with a warning.
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file())
    mask_by_stem = {}
    if gt_path is not None:
        gt_path = Path(gt_path)
        mask_by_stem = {p.stem: p for p in gt_path.iterdir() if p.is_file()}

    loaded: list[tuple[str, np.ndarray, np.ndarray | None]] = []
    max_label = 1
    for p in files:
        try:
            with PILImage.open(p) as im:
                im = im.convert("RGB")
                im = _center_crop(_resize_short_side(im, size, PILImage.BILINEAR), size)
                image = image_to_unit_range(np.asarray(im))
        except Exception as exc:  # noqa: BLE001 - skip-and-warn is the contract
            warnings.warn(f"skipping unreadable image {p}: {exc}", stacklevel=2)
            continue
        labels = None
        if gt_path is not None:
            if p.stem not in mask_by_stem:
                raise FileNotFoundError(f"no mask found for image {p.name} in {gt_path}")
            with PILImage.open(mask_by_stem[p.stem]) as mim:
                mim = mim.convert("L")
                mim = _center_crop(_resize_short_side(mim, size, PILImage.NEAREST), size)
                labels = _mask_to_labels(np.asarray(mim))
            max_label = max(max_label, int(labels.max()))
        loaded.append((p.stem, image, labels))

    n = max_label + 1
    examples = []
    for stem, image, labels in loaded:
        gt = None
        if labels is not None:
            gt = np.stack([(labels == k) for k in range(n)]).astype(np.uint8)
        examples.append(LabeledExample(image=image, gt_masks=gt, id=stem))
    return examples


def export_dataset(examples: list[LabeledExample], out_dir,
                   split: DatasetSplit | None = None) -> None:
    """Write images/ and masks/ PNG trees plus a manifest.csv (id, split)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    assignment = {}
    if split is not None:
        for name in ("train", "val", "test"):
            for i in split.part(name):
                assignment[i] = name
    with open(out_dir / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "split"])
        for ex in examples:
            PILImage.fromarray(unit_range_to_uint8(ex.image)).save(
                out_dir / "images" / f"{ex.id}.png")
            if ex.gt_masks is not None:
                labels = np.argmax(ex.gt_masks, axis=0).astype(np.uint8)
                PILImage.fromarray(labels, mode="L").save(
                    out_dir / "masks" / f"{ex.id}.png")
            writer.writerow([ex.id, assignment.get(ex.id, "train")])


def load_exported_dataset(root, size: int | None = None) -> tuple[list[LabeledExample], DatasetSplit]:
    """Read back an export_dataset tree using the manifest's split column."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    if size is None:
        with PILImage.open(root / "images" / f"{rows[0]['id']}.png") as im:
            size = min(im.size)
    examples = load_image_folder(root / "images", size,
                                 gt_path=root / "masks" if (root / "masks").exists() else None)
    by_id = {ex.id: ex for ex in examples}
    split = DatasetSplit(
        train=[r["id"] for r in rows if r["split"] == "train"],
        val=[r["id"] for r in rows if r["split"] == "val"],
        test=[r["id"] for r in rows if r["split"] == "test"],
    )
    ordered = [by_id[r["id"]] for r in rows if r["id"] in by_id]
    return ordered, split


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_dataset(examples: list[LabeledExample], fractions=None,
                  id_lists: tuple[list[str], list[str], list[str]] | None = None,
                  rng: np.random.Generator | None = None,
                  require_gt: bool = True) -> DatasetSplit:
    """Partition examples into train/val/test.

    Either ``fractions`` (three numbers summing to 1; boundaries are rounded
    cumulative counts, so exact ratios give exact sizes) with a seeded rng
    for the shuffle, or explicit ``id_lists`` that must partition the ids.
    Val and test examples must carry ground-truth masks.
    """
    ids = [ex.id for ex in examples]
    by_id = {ex.id: ex for ex in examples}
    if (fractions is None) == (id_lists is None):
        raise ValueError("pass exactly one of fractions or id_lists")

    if id_lists is not None:
        split = DatasetSplit(train=list(id_lists[0]), val=list(id_lists[1]),
                             test=list(id_lists[2]))
        listed = set(split.train) | set(split.val) | set(split.test)
        if listed != set(ids):
            raise ValueError("id lists do not partition the dataset ids")
    else:
        if abs(sum(fractions) - 1) > 1e-6 or len(fractions) != 3:
            raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
        if rng is None:
            raise ValueError("fraction-based splitting needs an rng")
        order = list(rng.permutation(len(ids)))
        shuffled = [ids[i] for i in order]
        total = len(ids)
        b1 = round(total * fractions[0])
        b2 = round(total * (fractions[0] + fractions[1]))
        split = DatasetSplit(train=shuffled[:b1], val=shuffled[b1:b2], test=shuffled[b2:])

    if require_gt:
        for name in ("val", "test"):
            for i in split.part(name):
                if by_id[i].gt_masks is None:
                    raise ValueError(f"{name} example {i!r} has no ground-truth masks")
    return split
