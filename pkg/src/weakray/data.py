"""Dataset ingestion, preprocessing, splits, and a synthetic generator.

Two CSV schemas are understood, matching the public chest radiograph
release:

* label CSV: header row, ``Image Index`` then ``Finding Labels`` with
  pipe-separated disease names ("No Finding" means all-negative);
* box CSV: ``Image Index, Finding Label, x, y, w, h`` taken positionally,
  with boxes in the original 1024x1024 coordinates.

Images are read from 8-bit PGM files (PNG works too when Pillow is
installed).  The synthetic generator plants one bright disc per positive
class on a noisy background and records the disc's tight rectangle as the
ground-truth box, giving a desk-scale dataset with full localization
labels.
"""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .localization import BBox

__all__ = [
    "CHEST14_CLASSES",
    "CsvFormatError",
    "LabelTable",
    "parse_label_csv",
    "emit_label_csv",
    "parse_bbox_csv",
    "rescale_boxes",
    "read_pgm",
    "write_pgm",
    "read_image",
    "bilinear_resize",
    "PreprocessConfig",
    "preprocess",
    "Sample",
    "SplitSpec",
    "split",
    "patient_id",
    "SyntheticSpec",
    "generate_synthetic",
    "write_synthetic_dataset",
    "load_dataset",
    "sample_rng",
]

# canonical class order for the 14 thoracic findings
CHEST14_CLASSES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
)

# spellings seen in the wild mapped onto the canonical names
_CLASS_ALIASES = {"Pleural_Thickening": "Pleural Thickening"}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CsvFormatError(ValueError):
    """A CSV row could not be interpreted; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _open_text(stream_or_path):
    if isinstance(stream_or_path, (str, Path)):
        return open(stream_or_path, "r", newline=""), True
    return stream_or_path, False


@dataclass
class LabelTable:
    """image id -> multi-hot vector over a fixed class order."""

    image_ids: list
    labels: np.ndarray  # (n, C) uint8
    class_names: tuple

    def __len__(self):
        return len(self.image_ids)

    def index_of(self, image_id: str) -> int:
        return self.image_ids.index(image_id)

    def vector_for(self, image_id: str) -> np.ndarray:
        return self.labels[self.index_of(image_id)]


def _resolve_class(name: str, class_names, line: int) -> int:
    name = _CLASS_ALIASES.get(name, name)
    try:
        return class_names.index(name) if isinstance(class_names, list) else list(class_names).index(name)
    except ValueError:
        raise CsvFormatError(line, f"unknown class name {name!r}") from None


def parse_label_csv(stream_or_path, class_names=CHEST14_CLASSES) -> LabelTable:
    """Parse a label CSV into a :class:`LabelTable`.

    Findings are pipe-separated in the second column; "No Finding" (or an
    empty field) yields the all-zero vector.  Unknown class names and
    malformed rows raise :class:`CsvFormatError` with the line number.
    """
    stream, owned = _open_text(stream_or_path)
    names = list(class_names)
    try:
        reader = csv.reader(stream)
        try:
            next(reader)  # header
        except StopIteration:
            raise CsvFormatError(1, "missing header row") from None
        ids, rows = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise CsvFormatError(line, f"expected at least 2 columns, got {len(row)}")
            image_id = row[0].strip()
            if not image_id:
                raise CsvFormatError(line, "empty image id")
            vec = np.zeros(len(names), dtype=np.uint8)
            findings = row[1].strip()
            if findings and findings != "No Finding":
                for part in findings.split("|"):
                    vec[_resolve_class(part.strip(), names, line)] = 1
            ids.append(image_id)
            rows.append(vec)
        labels = np.stack(rows) if rows else np.zeros((0, len(names)), dtype=np.uint8)
        return LabelTable(ids, labels, tuple(names))
    finally:
        if owned:
            stream.close()


def emit_label_csv(table: LabelTable, stream) -> None:
    """Inverse of :func:`parse_label_csv` (round-trips exactly)."""
    stream.write("Image Index,Finding Labels\n")
    for image_id, vec in zip(table.image_ids, table.labels):
        findings = "|".join(
            name for name, bit in zip(table.class_names, vec) if bit
        ) or "No Finding"
        stream.write(f"{image_id},{findings}\n")


def parse_bbox_csv(stream_or_path, class_names=CHEST14_CLASSES) -> dict:
    """Parse a box CSV into image id -> list of :class:`BBox`.

    Columns are taken positionally: image id, class, x, y, w, h.  Boxes
    stay in their source coordinates (1024x1024 for the public set); use
    :func:`rescale_boxes` to bring them to a working resolution.
    """
    stream, owned = _open_text(stream_or_path)
    names = list(class_names)
    try:
        reader = csv.reader(stream)
        try:
            next(reader)
        except StopIteration:
            raise CsvFormatError(1, "missing header row") from None
        out: dict[str, list[BBox]] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 6:
                raise CsvFormatError(line, f"expected 6 columns, got {len(row)}")
            image_id = row[0].strip()
            class_id = _resolve_class(row[1].strip(), names, line)
            try:
                x, y, w, h = (float(v) for v in row[2:6])
            except ValueError:
                raise CsvFormatError(line, f"non-numeric box coordinates {row[2:6]}") from None
            if w <= 0 or h <= 0:
                raise CsvFormatError(line, f"nonpositive box extent w={w}, h={h}")
            out.setdefault(image_id, []).append(BBox(x, y, w, h, class_id=class_id))
        return out
    finally:
        if owned:
            stream.close()


def rescale_boxes(boxes, src_size: float, dst_size: float):
    """Scale box coordinates from one square resolution to another."""
    f = dst_size / src_size
    return [
        BBox(b.x * f, b.y * f, b.w * f, b.h * f, class_id=b.class_id, score=b.score)
        for b in boxes
    ]


# ---------------------------------------------------------------------------
# image io


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM (binary P5 or ascii P2) as a (H, W) uint8 array."""
    with open(path, "rb") as f:
        content = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", content[pos:])
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P2"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    if magic == b"P5":
        data = np.frombuffer(content, dtype=np.uint8, count=width * height, offset=pos)
    else:
        data = np.array(content[pos:].split()[: width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path}: pixel data truncated")
    return data.reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"write_pgm needs a (H, W) uint8 array, got {img.dtype} {img.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def read_image(path) -> np.ndarray:
    """Read a grayscale image (PGM natively, PNG via Pillow)."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ValueError(
            f"cannot read {path}: only PGM is supported without Pillow installed"
        ) from None
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def bilinear_resize(image: np.ndarray, out_shape) -> np.ndarray:
    """Bilinear resample with half-pixel centers (the common convention)."""
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape
    out_h, out_w = out_shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass(frozen=True)
class PreprocessConfig:
    """Normalization and geometry applied to raw grayscale images.

    ``mean``/``std`` are per-channel constants on the [0, 1] intensity
    scale (the usual large-corpus statistics by default).  ``resize_to``
    and ``crop`` of 0 disable that stage, which is how the synthetic
    64x64 sets are fed through unchanged.
    """

    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    resize_to: int = 256
    crop: int = 224


def preprocess(image: np.ndarray, config: PreprocessConfig = PreprocessConfig(),
               mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Grayscale (H, W) 8-bit image to a normalized (3, h, w) float array.

    Pipeline: scale to [0, 1], bilinear resize, replicate to 3 channels,
    per-channel normalize, then crop (random offset in train mode via the
    explicit rng, centered otherwise).
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"preprocess: expected a (H, W) grayscale image, got {img.shape}")
    x = img.astype(np.float64) / 255.0
    if config.resize_to:
        x = bilinear_resize(x, (config.resize_to, config.resize_to))
    mean = np.broadcast_to(np.asarray(config.mean, dtype=np.float64), (3,))
    std = np.broadcast_to(np.asarray(config.std, dtype=np.float64), (3,))
    out = (x[None, :, :] - mean[:, None, None]) / std[:, None, None]
    if config.crop:
        h, w = out.shape[1:]
        if h < config.crop or w < config.crop:
            raise ValueError(f"preprocess: image {h}x{w} smaller than crop {config.crop}")
        if mode == "train":
            if rng is None:
                raise ValueError("preprocess: train-mode crop needs an explicit rng")
            oy = int(rng.integers(0, h - config.crop + 1))
            ox = int(rng.integers(0, w - config.crop + 1))
        else:
            oy = (h - config.crop) // 2
            ox = (w - config.crop) // 2
        out = out[:, oy : oy + config.crop, ox : ox + config.crop]
    return out


@dataclass
class Sample:
    """One preprocessed example: pixels, multi-hot labels, optional boxes."""

    image_id: str
    pixels: Tensor  # (3, H, W), normalized
    labels: np.ndarray  # (C,) in {0, 1}
    gt_boxes: list | None = None


def sample_rng(base_seed: int, sample_index: int, epoch: int = 0) -> np.random.Generator:
    """Deterministic per-sample generator: reproducible regardless of the
    order or parallelism samples are prepared in."""
    return np.random.default_rng(np.random.SeedSequence((base_seed, epoch, sample_index)))


# ---------------------------------------------------------------------------
# splits


def patient_id(image_id: str) -> str:
    """Patient key derived from the image id prefix (before the first '_')."""
    return image_id.split("_", 1)[0]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0
    group_by_patient: bool = False

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be nonnegative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split(table_or_ids, spec: SplitSpec) -> tuple:
    """Deterministic (train, val, test) partition of image ids.

    Without grouping the sizes are floor(train*n) and floor(val*n), with
    the remainder in test.  With grouping, whole patients are assigned in
    shuffled order until each bucket reaches its quota, so no patient
    spans two splits.
    """
    ids = list(table_or_ids.image_ids) if isinstance(table_or_ids, LabelTable) else list(table_or_ids)
    if not ids:
        raise ValueError("split: empty input")
    rng = np.random.default_rng(spec.seed)
    if not spec.group_by_patient:
        order = rng.permutation(len(ids))
        n_train = int(spec.train * len(ids))
        n_val = int(spec.val * len(ids))
        shuffled = [ids[i] for i in order]
        return (
            shuffled[:n_train],
            shuffled[n_train : n_train + n_val],
            shuffled[n_train + n_val :],
        )
    groups: dict[str, list[str]] = {}
    for image_id in ids:
        groups.setdefault(patient_id(image_id), []).append(image_id)
    keys = sorted(groups)
    order = rng.permutation(len(keys))
    quota_train = spec.train * len(ids)
    quota_val = spec.val * len(ids)
    train, val, test = [], [], []
    for gi in order:
        members = groups[keys[gi]]
        if len(train) + len(members) <= quota_train or not train:
            train.extend(members)
        elif len(val) + len(members) <= quota_val or not val:
            val.extend(members)
        else:
            test.extend(members)
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic planted-disc datasets


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-disc dataset description.

    Each class plants, with probability ``positive_rate``, one filled disc
    of class-specific intensity at a uniform position; the label is 1 iff
    the disc was planted and the tight rectangle around it is recorded as
    the ground-truth box.  The background is truncated gaussian noise.
    """

    image_size: int = 64
    num_classes: int = 2
    radius_range: tuple = (8, 13)  # [lo, hi)
    intensities: tuple | None = None  # per class; auto-spaced when None
    background: float = 0.1
    noise_level: float = 0.05
    positive_rate: float = 0.5
    avoid_overlap: bool = True
    normalize_mean: float = 0.25
    normalize_std: float = 0.3
    seed: int = 0

    def class_intensity(self, class_id: int) -> float:
        if self.intensities is not None:
            return self.intensities[class_id]
        if self.num_classes == 1:
            return 0.9
        return 0.9 - 0.45 * class_id / (self.num_classes - 1)

    @property
    def class_names(self) -> tuple:
        return tuple(f"class_{i}" for i in range(self.num_classes))

    def validate(self):
        if self.radius_range[1] > self.image_size // 2:
            raise ValueError(
                f"disc radius up to {self.radius_range[1]} does not fit a "
                f"{self.image_size}px image"
            )
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must lie in [0, 1]")


def _plant_disc(img, cy, cx, radius, intensity):
    size = img.shape[0]
    yy, xx = np.ogrid[:size, :size]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img[mask] = np.maximum(img[mask], intensity)
    rows, cols = np.nonzero(mask)
    return BBox(
        float(cols.min()),
        float(rows.min()),
        float(cols.max() - cols.min() + 1),
        float(rows.max() - rows.min() + 1),
    )


def generate_synthetic_images(spec: SyntheticSpec, n: int):
    """Raw form: (ids, uint8 images, labels, per-image box lists).

    Bit-identical for a fixed spec (images are quantized to 8 bits before
    anything downstream sees them).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    ids, images, boxes_all = [], [], []
    labels = np.zeros((n, spec.num_classes), dtype=np.uint8)
    for i in range(n):
        img = np.clip(
            spec.background + rng.normal(0.0, spec.noise_level, size=(size, size)),
            0.0,
            1.0,
        )
        boxes = []
        planted: list[tuple] = []
        for ci in range(spec.num_classes):
            if rng.random() >= spec.positive_rate:
                continue
            radius = int(rng.integers(spec.radius_range[0], spec.radius_range[1]))
            for _attempt in range(64):
                cy = int(rng.integers(radius, size - radius))
                cx = int(rng.integers(radius, size - radius))
                if not spec.avoid_overlap or all(
                    (cy - py) ** 2 + (cx - px) ** 2 > (radius + pr) ** 2
                    for py, px, pr in planted
                ):
                    break
            box = _plant_disc(img, cy, cx, radius, spec.class_intensity(ci))
            box.class_id = ci
            planted.append((cy, cx, radius))
            boxes.append(box)
            labels[i, ci] = 1
        ids.append(f"synth{i:05d}_000")
        images.append(np.round(img * 255.0).astype(np.uint8))
        boxes_all.append(boxes)
    return ids, images, labels, boxes_all


def _synthetic_preprocess(spec: SyntheticSpec):
    return PreprocessConfig(
        mean=(spec.normalize_mean,) * 3,
        std=(spec.normalize_std,) * 3,
        resize_to=0,
        crop=0,
    )


def generate_synthetic(spec: SyntheticSpec, n: int) -> list:
    """Generate ``n`` ready-to-train :class:`Sample` objects."""
    ids, images, labels, boxes_all = generate_synthetic_images(spec, n)
    pp = _synthetic_preprocess(spec)
    return [
        Sample(image_id, Tensor(preprocess(img, pp)), labels[i], boxes_all[i] or None)
        for i, (image_id, img) in enumerate(zip(ids, images))
    ]


def write_synthetic_dataset(spec: SyntheticSpec, n: int, out_dir) -> None:
    """Write PGM images plus a manifest CSV with the label schema and the
    planted-box columns, and a classes.txt naming the class order."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ids, images, labels, boxes_all = generate_synthetic_images(spec, n)
    names = spec.class_names
    with open(out_dir / "manifest.csv", "w") as f:
        f.write("Image Index,Finding Labels,Box Class,Bbox x,Bbox y,Bbox w,Bbox h\n")
        for i, image_id in enumerate(ids):
            findings = "|".join(
                names[ci] for ci in range(spec.num_classes) if labels[i, ci]
            ) or "No Finding"
            rows = boxes_all[i] or [None]
            for box in rows:
                if box is None:
                    f.write(f"{image_id},{findings},,,,,\n")
                else:
                    f.write(
                        f"{image_id},{findings},{names[box.class_id]},"
                        f"{box.x:g},{box.y:g},{box.w:g},{box.h:g}\n"
                    )
    with open(out_dir / "classes.txt", "w") as f:
        f.write("\n".join(names) + "\n")
    with open(out_dir / "preprocess.cfg", "w") as f:
        f.write(f"data.mean = {spec.normalize_mean:g}\n")
        f.write(f"data.std = {spec.normalize_std:g}\n")
        f.write("data.resize = 0\ndata.crop = 0\n")
    for image_id, img in zip(ids, images):
        write_pgm(out_dir / "images" / f"{image_id}.pgm", img)


def load_dataset(directory, pp: PreprocessConfig | None = None,
                 class_names=None, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> tuple:
    """Load a dataset directory into (samples, class_names).

    The directory holds ``images/`` plus either a synthetic
    ``manifest.csv`` (labels and boxes in one file, classes.txt alongside)
    or a ``labels.csv`` and optional ``boxes.csv`` pair in the public
    schema.  Preprocessing defaults come from ``preprocess.cfg`` when the
    directory carries one.
    """
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    classes_file = directory / "classes.txt"
    if class_names is None:
        if classes_file.exists():
            class_names = tuple(
                line.strip() for line in classes_file.read_text().splitlines() if line.strip()
            )
        else:
            class_names = CHEST14_CLASSES
    if pp is None:
        cfg_file = directory / "preprocess.cfg"
        if cfg_file.exists():
            from .config import parse_config_text, preprocess_from_flat

            pp = preprocess_from_flat(parse_config_text(cfg_file.read_text()))
        else:
            pp = PreprocessConfig()

    boxes: dict[str, list[BBox]] = {}
    if manifest.exists():
        ids, vectors = [], []
        seen = {}
        with open(manifest) as f:
            reader = csv.reader(f)
            next(reader)
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                image_id, findings = row[0].strip(), row[1].strip()
                if image_id not in seen:
                    seen[image_id] = True
                    vec = np.zeros(len(class_names), dtype=np.uint8)
                    if findings and findings != "No Finding":
                        for part in findings.split("|"):
                            vec[_resolve_class(part.strip(), list(class_names), line)] = 1
                    ids.append(image_id)
                    vectors.append(vec)
                if len(row) >= 7 and row[2].strip():
                    ci = _resolve_class(row[2].strip(), list(class_names), line)
                    x, y, w, h = (float(v) for v in row[3:7])
                    boxes.setdefault(image_id, []).append(BBox(x, y, w, h, class_id=ci))
        labels = np.stack(vectors) if vectors else np.zeros((0, len(class_names)), np.uint8)
        table = LabelTable(ids, labels, tuple(class_names))
    else:
        table = parse_label_csv(directory / "labels.csv", class_names)
        boxes_csv = directory / "boxes.csv"
        if boxes_csv.exists():
            boxes = parse_bbox_csv(boxes_csv, class_names)

    samples = []
    for i, image_id in enumerate(table.image_ids):
        img = read_image(_find_image(directory / "images", image_id))
        local_rng = rng
        if mode == "train" and rng is None:
            local_rng = sample_rng(0, i)
        pixels = Tensor(preprocess(img, pp, mode=mode, rng=local_rng))
        samples.append(Sample(image_id, pixels, table.labels[i], boxes.get(image_id)))
    return samples, tuple(class_names)


def _find_image(images_dir: Path, image_id: str) -> Path:
    candidates = [images_dir / image_id]
    candidates += [images_dir / f"{image_id}{ext}" for ext in (".pgm", ".png")]
    stem = Path(image_id).stem
    candidates += [images_dir / f"{stem}{ext}" for ext in (".pgm", ".png")]
    for c in candidates:
        if c.exists():
            return c
    raise FileNotFoundError(f"no image file for id {image_id!r} under {images_dir}")
