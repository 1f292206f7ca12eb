"""Leakage-safe dataset management.

Splitting happens at the source-image level and is tracked by image id;
tiling is only available *through* a finalized split manifest
(:func:`tile_dataset` / :func:`build_tile_arrays`), so no image can ever
contribute tiles to more than one split. Cross-validation folds further
partition the training split only.

Also provides the synthetic four-class image generator used for desk-scale
experiments: Gaussian-random-field texture (class-ordered amplitude and
correlation length) plus elliptical dark blobs playing the role of cells.
The class signal lives in the field-wide texture, not in the blobs, so any
local patch of an image carries its class.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import seeds
from .errors import DataError, FoldError, QuotaError
from .pngio import load_gray_png, save_gray_png
from .tiling import GridSpec, resize_bilinear_batch, tile_image

NUM_CLASSES = 4
CLASS_NAMES = ("control", "20nM", "40nM", "100nM")
SPLITS = ("train", "val", "test")


def class_id_of(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise DataError(f"unknown class name {name!r}; expected one of {CLASS_NAMES}") from None


def class_name_of(class_id: int) -> str:
    if not 0 <= int(class_id) < NUM_CLASSES:
        raise DataError(f"class id {class_id} out of range 0..{NUM_CLASSES - 1}")
    return CLASS_NAMES[int(class_id)]


# ---------------------------------------------------------------------------
# Split manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    """Assignment of every source image to exactly one of train/val/test."""

    entries: Tuple[Tuple[str, int, str], ...]  # (source_id, class_id, split)
    seed: int

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise DataError("duplicate source_id in split manifest")
        for _, label, split in self.entries:
            if not 0 <= label < NUM_CLASSES:
                raise DataError(f"label {label} out of range")
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r}")

    def ids(self, split: str) -> List[str]:
        return [sid for sid, _, sp in self.entries if sp == split]

    def ids_by_class(self, split: str) -> Dict[int, List[str]]:
        out: Dict[int, List[str]] = {c: [] for c in range(NUM_CLASSES)}
        for sid, label, sp in self.entries:
            if sp == split:
                out[label].append(sid)
        return out

    def label_of(self, source_id: str) -> int:
        for sid, label, _ in self.entries:
            if sid == source_id:
                return label
        raise DataError(f"source_id {source_id!r} not in manifest")

    def counts(self) -> Dict[str, int]:
        out = {sp: 0 for sp in SPLITS}
        for _, _, sp in self.entries:
            out[sp] += 1
        return out

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source_id", "class", "split"])
            for sid, label, sp in self.entries:
                w.writerow([sid, label, sp])

    @classmethod
    def load_csv(cls, path, seed: int = -1) -> "SplitManifest":
        entries = []
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header[:3] != ["source_id", "class", "split"]:
                raise DataError(f"unexpected manifest header {header!r} in {path}")
            for row in r:
                entries.append((row[0], int(row[1]), row[2]))
        return cls(entries=tuple(entries), seed=seed)


def stratified_split(
    ids_by_class: Dict[int, Sequence[str]],
    quota,
    seed: int,
) -> SplitManifest:
    """Class-stratified random split of source images.

    ``quota`` is either one ``(train, val, test)`` triple applied to every
    class or a sequence of per-class triples. A ``train`` of None means "all
    remaining images"; explicit integer quotas must exhaust each class
    exactly, since a manifest accounts for every image. Shuffling is a
    deterministic function of ``seed``.
    """
    classes = sorted(ids_by_class)
    if isinstance(quota[0], (int, type(None))):
        quota = [tuple(quota)] * len(classes)
    if len(quota) != len(classes):
        raise QuotaError(f"need {len(classes)} per-class quotas, got {len(quota)}")

    rng = np.random.default_rng(seed)
    entries = []
    for cls_id, (n_train, n_val, n_test) in zip(classes, quota):
        ids = sorted(ids_by_class[cls_id])
        n = len(ids)
        if n_train is None:
            n_train = n - n_val - n_test
        if n_train < 0 or n < n_train + n_val + n_test:
            raise QuotaError(
                f"class {cls_id}: quota ({n_train}, {n_val}, {n_test}) needs "
                f"{max(n_train, 0) + n_val + n_test} images, have {n}"
            )
        if n != n_train + n_val + n_test:
            raise QuotaError(
                f"class {cls_id}: quota leaves {n - n_train - n_val - n_test} "
                "images unassigned; use train=None for a remainder split"
            )
        order = rng.permutation(n)
        shuffled = [ids[i] for i in order]
        for sid in shuffled[:n_train]:
            entries.append((sid, cls_id, "train"))
        for sid in shuffled[n_train : n_train + n_val]:
            entries.append((sid, cls_id, "val"))
        for sid in shuffled[n_train + n_val :]:
            entries.append((sid, cls_id, "test"))
    return SplitManifest(entries=tuple(entries), seed=seed)


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    """Fold index (0..k-1) for every training-split source image."""

    fold_of: Dict[str, int]
    k: int

    def fold_ids(self, fold: int) -> List[str]:
        return sorted(sid for sid, f in self.fold_of.items() if f == fold)

    def complement_ids(self, fold: int) -> List[str]:
        return sorted(sid for sid, f in self.fold_of.items() if f != fold)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source_id", "fold"])
            for sid in sorted(self.fold_of):
                w.writerow([sid, self.fold_of[sid]])

    @classmethod
    def load_csv(cls, path) -> "FoldAssignment":
        fold_of = {}
        with open(path, newline="") as f:
            r = csv.reader(f)
            next(r)
            for row in r:
                fold_of[row[0]] = int(row[1])
        k = max(fold_of.values()) + 1 if fold_of else 0
        return cls(fold_of=fold_of, k=k)


def make_folds(manifest: SplitManifest, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Class-stratified k-fold partition of the *training* split.

    Validation/test images never appear. Within each class, shuffled ids are
    dealt round-robin; the dealing start fold rotates by the cumulative count
    of previous classes (mod k), which keeps per-class fold sizes within one
    of each other *and* balances total fold sizes (e.g. train counts
    77/77/78/78 with k=5 give five folds of exactly 62).
    """
    if k < 1:
        raise FoldError(f"k must be >= 1, got {k}")
    by_class = manifest.ids_by_class("train")
    if not any(by_class.values()):
        raise FoldError("manifest has no training split")
    rng = np.random.default_rng(seed)
    fold_of: Dict[str, int] = {}
    start = 0
    for cls_id in sorted(by_class):
        ids = sorted(by_class[cls_id])
        if not ids:
            continue
        if len(ids) < k:
            raise FoldError(f"class {cls_id} has {len(ids)} training images, fewer than k={k}")
        order = rng.permutation(len(ids))
        for i, idx in enumerate(order):
            fold_of[ids[idx]] = (start + i) % k
        start = (start + len(ids)) % k
    return FoldAssignment(fold_of=fold_of, k=k)


# ---------------------------------------------------------------------------
# Synthetic imagery
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the four-class synthetic generator.

    Per-class sequences are indexed by class id and must be strictly ordered
    (monotone) so that every local patch carries class signal: texture
    amplitude rises with class, correlation length falls, blob density rises.
    Blob geometry is shared across classes on purpose; class identity lives
    in the texture statistics, not in blob shape.
    """

    images_per_class: int = 56
    image_size: Tuple[int, int] = (600, 800)  # (height, width)
    amplitude: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    corr_length: Tuple[float, ...] = (4.0, 3.2, 2.5, 2.0)
    blob_density: Tuple[float, ...] = (20.0, 35.0, 50.0, 65.0)  # blobs per megapixel
    blob_radius: Tuple[Tuple[float, float], ...] = ((8.0, 20.0),) * NUM_CLASSES
    base_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("amplitude", "corr_length", "blob_density", "blob_radius"):
            if len(getattr(self, name)) != NUM_CLASSES:
                raise DataError(f"SynthConfig.{name} needs {NUM_CLASSES} entries")
        for name in ("amplitude", "corr_length"):
            vals = getattr(self, name)
            diffs = np.diff(vals)
            if not (np.all(diffs > 0) or np.all(diffs < 0)):
                raise DataError(f"SynthConfig.{name} must be strictly ordered, got {vals}")
        if any(d < 0 for d in self.blob_density):
            raise DataError("blob densities must be non-negative")
        if self.images_per_class < 1:
            raise DataError("images_per_class must be positive")


def _texture_field(rng, shape, corr_length, amplitude):
    noise = rng.standard_normal(shape)
    fieldv = gaussian_filter(noise, sigma=corr_length, mode="reflect")
    sd = fieldv.std()
    if sd > 0:
        fieldv *= amplitude / sd
    return fieldv


def _stamp_blobs(rng, img, density_per_mpx, radius_range, depth_range=(0.15, 0.35)):
    h, w = img.shape
    n = rng.poisson(density_per_mpx * (h * w) / 1e6)
    r_lo, r_hi = radius_range
    for _ in range(n):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        a = rng.uniform(r_lo, r_hi)
        b = rng.uniform(r_lo, r_hi)
        theta = rng.uniform(0, np.pi)
        depth = rng.uniform(*depth_range)
        r_max = max(a, b)
        y0, y1 = int(max(0, np.floor(cy - r_max))), int(min(h, np.ceil(cy + r_max) + 1))
        x0, x1 = int(max(0, np.floor(cx - r_max))), int(min(w, np.ceil(cx + r_max) + 1))
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy = yy - cy
        dx = xx - cx
        ct, st = np.cos(theta), np.sin(theta)
        u = (dx * ct + dy * st) / a
        v = (-dx * st + dy * ct) / b
        q = u * u + v * v
        weight = np.clip(1.0 - q, 0.0, 1.0)  # quadratic falloff to a soft edge
        img[y0:y1, x0:x1] -= depth * weight
    return img


def synth_image(cfg: SynthConfig, class_id: int, image_index: int) -> np.ndarray:
    """One synthetic image; a pure function of (cfg.seed, class_id, image_index)."""
    rng = seeds.rng_for(cfg.seed, seeds.SYNTH_OFFSET, class_id * cfg.images_per_class + image_index)
    img = np.full(cfg.image_size, cfg.base_level, dtype=np.float64)
    img += _texture_field(rng, cfg.image_size, cfg.corr_length[class_id], cfg.amplitude[class_id])
    _stamp_blobs(rng, img, cfg.blob_density[class_id], cfg.blob_radius[class_id])
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig):
    """All images of the synthetic dataset as (source_id, class_id, image) triples."""
    out = []
    for class_id in range(NUM_CLASSES):
        for i in range(cfg.images_per_class):
            sid = f"{CLASS_NAMES[class_id]}_{i:03d}"
            out.append((sid, class_id, synth_image(cfg, class_id, i)))
    return out


def write_synthetic_dataset(cfg: SynthConfig, root) -> List[Tuple[str, int]]:
    """Generate and save the dataset under ``root/{class_name}/{source_id}.png``."""
    root = Path(root)
    written = []
    for class_id in range(NUM_CLASSES):
        cls_dir = root / CLASS_NAMES[class_id]
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(cfg.images_per_class):
            sid = f"{CLASS_NAMES[class_id]}_{i:03d}"
            save_gray_png(cls_dir / f"{sid}.png", synth_image(cfg, class_id, i))
            written.append((sid, class_id))
    return written


def scan_dataset(root) -> Dict[int, List[str]]:
    """Discover ``root/{class_name}/*.png`` and return ids grouped by class."""
    root = Path(root)
    out: Dict[int, List[str]] = {}
    for class_id, name in enumerate(CLASS_NAMES):
        cls_dir = root / name
        if not cls_dir.is_dir():
            continue
        out[class_id] = sorted(p.stem for p in cls_dir.glob("*.png"))
    if not out:
        raise DataError(f"no class directories found under {root}")
    return out


def load_source_image(root, source_id: str, class_id: int) -> np.ndarray:
    path = Path(root) / class_name_of(class_id) / f"{source_id}.png"
    if not path.is_file():
        raise DataError(f"source image not found: {path}")
    return load_gray_png(path)


# ---------------------------------------------------------------------------
# Tiling through the manifest (the only route, to keep splits leak-free)
# ---------------------------------------------------------------------------

TILE_MANIFEST_HEADER = [
    "tile_id", "source_id", "class", "row", "col", "x0", "y0", "width", "height",
]


def tile_dataset(manifest: SplitManifest, data_root, grid: GridSpec, out_dir,
                 splits: Sequence[str] = SPLITS) -> Dict[str, int]:
    """Tile every image of the given splits to ``out_dir/{split}/{class}/{tile_id}.png``.

    Requires a finalized :class:`SplitManifest`; tiling any image outside a
    manifest is deliberately not offered at the dataset level. Each split also
    gets a ``manifest.csv`` with per-tile geometry. Returns tile counts per
    split.
    """
    out_dir = Path(out_dir)
    counts = {}
    for split in splits:
        rows_csv = []
        split_dir = out_dir / split
        for sid, label, sp in sorted(manifest.entries):
            if sp != split:
                continue
            img = load_source_image(data_root, sid, label)
            cls_dir = split_dir / class_name_of(label)
            cls_dir.mkdir(parents=True, exist_ok=True)
            for rec, pixels in tile_image(img, grid, sid, label):
                save_gray_png(cls_dir / f"{rec.tile_id}.png", pixels)
                r = rec.rect
                rows_csv.append([rec.tile_id, sid, label, r.row_index, r.col_index,
                                 r.x0, r.y0, r.width, r.height])
        split_dir.mkdir(parents=True, exist_ok=True)
        with open(split_dir / "manifest.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TILE_MANIFEST_HEADER)
            w.writerows(rows_csv)
        counts[split] = len(rows_csv)
    return counts


@dataclass
class TileArrays:
    """In-memory tile set for one split: resized images plus provenance."""

    x: np.ndarray          # (N, side, side) float32 in [0, 1]
    labels: np.ndarray     # (N,) int64
    source_ids: List[str]
    tile_ids: List[str]

    def __len__(self):
        return len(self.tile_ids)


def load_tile_split(tiles_root, split: str, input_size: int) -> TileArrays:
    """Read one split's tiles from disk, resizing to the model input size."""
    split_dir = Path(tiles_root) / split
    man_path = split_dir / "manifest.csv"
    if not man_path.is_file():
        raise DataError(f"tile manifest not found: {man_path}")
    tile_ids, source_ids, labels, imgs = [], [], [], []
    with open(man_path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != TILE_MANIFEST_HEADER:
            raise DataError(f"unexpected tile manifest header in {man_path}")
        for row in r:
            tile_id, sid, label = row[0], row[1], int(row[2])
            png = split_dir / class_name_of(label) / f"{tile_id}.png"
            imgs.append(load_gray_png(png))
            tile_ids.append(tile_id)
            source_ids.append(sid)
            labels.append(label)
    if not imgs:
        raise DataError(f"split {split!r} has no tiles under {tiles_root}")
    x = _resize_stack(imgs, input_size)
    return TileArrays(x=x, labels=np.asarray(labels, dtype=np.int64),
                      source_ids=source_ids, tile_ids=tile_ids)


def build_tile_arrays(manifest: SplitManifest, images_by_id: Dict[str, np.ndarray],
                      grid: GridSpec, input_size: int,
                      splits: Sequence[str] = SPLITS) -> Dict[str, TileArrays]:
    """In-memory equivalent of tile_dataset + load_tile_split.

    Images are first snapped to the 1/255 lattice so results match the PNG
    round-trip of the on-disk route bit for bit.
    """
    out = {}
    for split in splits:
        tile_ids, source_ids, labels, imgs = [], [], [], []
        for sid, label, sp in sorted(manifest.entries):
            if sp != split:
                continue
            img = np.floor(np.asarray(images_by_id[sid], dtype=np.float64) * 255.0 + 0.5) / 255.0
            for rec, pixels in tile_image(img.astype(np.float32), grid, sid, label):
                tile_ids.append(rec.tile_id)
                source_ids.append(sid)
                labels.append(label)
                imgs.append(pixels)
        if not imgs:
            raise DataError(f"split {split!r} is empty")
        out[split] = TileArrays(x=_resize_stack(imgs, input_size),
                                labels=np.asarray(labels, dtype=np.int64),
                                source_ids=source_ids, tile_ids=tile_ids)
    return out


def _resize_stack(imgs: List[np.ndarray], input_size: int) -> np.ndarray:
    shapes = {im.shape for im in imgs}
    parts = []
    for shape in sorted(shapes):
        idx = [i for i, im in enumerate(imgs) if im.shape == shape]
        stack = np.stack([imgs[i] for i in idx]).astype(np.float32)
        resized = resize_bilinear_batch(stack, input_size, input_size)
        parts.append((idx, resized))
    out = np.empty((len(imgs), input_size, input_size), dtype=np.float32)
    for idx, resized in parts:
        out[idx] = resized
    return out


def assert_leak_free(manifest: SplitManifest) -> None:
    """Raise if any source id appears in more than one split (belt-and-braces)."""
    seen: Dict[str, str] = {}
    for sid, _, sp in manifest.entries:
        if sid in seen and seen[sid] != sp:
            raise DataError(f"source {sid!r} appears in splits {seen[sid]!r} and {sp!r}")
        seen[sid] = sp
