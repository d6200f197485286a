"""Image/label ingestion, preprocessing, augmentation and fold assignment.

Images are float64 arrays [3, H, W] holding raw 0-255 values; masks are
[1, H, W] with values in {0, 1}. NetPBM (binary P5/P6, maxval 255) is the
native lossless format. PNG is accepted on read when Pillow is installed.
"""
from __future__ import annotations

import csv
import io
import os
import zlib
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError, StratificationError
from .rng import RngState

CLASS_NAMES = ("nevus", "melanoma", "sk")
LABEL_HEADER = ("image_id", "melanoma", "seborrheic_keratosis")
_WS = b" \t\n\r\v\f"


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    label_melanoma: int = 0
    label_sk: int = 0

    def __post_init__(self):
        self.label_melanoma = int(self.label_melanoma)
        self.label_sk = int(self.label_sk)
        if self.label_melanoma not in (0, 1) or self.label_sk not in (0, 1):
            raise IngestionError(f"{self.id}: labels must be 0 or 1")
        if self.label_melanoma and self.label_sk:
            raise IngestionError(f"{self.id}: a lesion cannot be both melanoma and seborrheic keratosis")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise IngestionError(f"{self.id}: image must be [3, H, W], got {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != (1,) + self.image.shape[1:]:
                raise IngestionError(f"{self.id}: mask shape {self.mask.shape} does not match image {self.image.shape}")
            if not np.isin(self.mask, (0.0, 1.0)).all():
                raise IngestionError(f"{self.id}: mask values must be exactly 0 or 1")

    @property
    def class_index(self) -> int:
        """0 nevus, 1 melanoma, 2 seborrheic keratosis."""
        return 1 if self.label_melanoma else (2 if self.label_sk else 0)

    @property
    def diagnosis(self) -> str:
        return CLASS_NAMES[self.class_index]


@dataclass
class Dataset:
    samples: list[Sample]
    folds: dict[str, int] | None = None

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise IngestionError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        lookup = self.by_id()
        return Dataset([lookup[i] for i in ids])

    def fold_ids(self, fold: int) -> list[str]:
        if self.folds is None:
            raise StratificationError("dataset has no fold assignment; run make_folds first")
        return sorted(i for i, f in self.folds.items() if f == fold)

    def class_counts(self) -> list[int]:
        counts = [0, 0, 0]
        for s in self.samples:
            counts[s.class_index] += 1
        return counts


# ---------------------------------------------------------------------------
# NetPBM / PNG
# ---------------------------------------------------------------------------


def _parse_netpbm(buf: bytes) -> np.ndarray:
    if len(buf) < 2:
        raise FormatError("file too short for a NetPBM header", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("header ended before width/height/maxval", pos)
        ch = buf[pos : pos + 1]
        if ch in (b"#",):
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise FormatError("unterminated header comment", pos)
            pos = nl + 1
            continue
        if ch in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
            pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos : pos + 1] != b"#":
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise FormatError(f"expected a decimal number in header, got {token[:16]!r}", start)
        fields.append((int(token), start))
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise FormatError(f"width must be positive, got {width}", wpos)
    if height < 1:
        raise FormatError(f"height must be positive, got {height}", hpos)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", mpos)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("expected a single whitespace byte after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"truncated pixel data: expected {need} bytes, found {have}", len(buf))
    if have > need:
        raise FormatError(f"{have - need} unexpected trailing bytes after pixel data", pos + need)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64)


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FormatError(f"{path}: PNG input needs Pillow (pip install 'lesionmt[png]')") from exc
    with Image.open(path) as im:
        if im.mode in ("1", "L", "LA", "I", "I;16"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a P5/P6 NetPBM (or PNG) file into [C, H, W] float64 0-255 values."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    try:
        return _parse_netpbm(buf)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from None


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W], got {img.shape}")
    if not np.array_equal(img, np.round(img)) or img.min() < 0 or img.max() > 255:
        raise ValueError("pixel values must be integers in 0..255")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + img.transpose(1, 2, 0).astype(np.uint8).tobytes()


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_netpbm(img))


def mask_binarize(mask: np.ndarray) -> np.ndarray:
    """Map 0-255 mask values to {0, 1} (values above 127 are lesion)."""
    return (np.asarray(mask) > 127).astype(np.float64)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a {0,1} mask as a P5 file with values {0, 255}."""
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    write_image(path, m.astype(np.float64) * 255.0)


# ---------------------------------------------------------------------------
# geometry and intensity
# ---------------------------------------------------------------------------


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C, H, W] with half-pixel centres and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry = _bilinear_matrix(h, out_h)
    rx = _bilinear_matrix(w, out_w)
    return np.einsum("oh,chw,pw->cop", ry, img, rx)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of [C, H, W]; preserves binary masks."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img)
    _, h, w = img.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[:, ys][:, :, xs]


def normalize(img: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit population std; near-constant channels are only centred."""
    img = np.asarray(img, dtype=np.float64)
    mean = img.mean(axis=(1, 2), keepdims=True)
    centred = img - mean
    std = np.sqrt((centred * centred).mean(axis=(1, 2), keepdims=True))
    std = np.where(std < 1e-8, 1.0, std)
    return centred / std


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral transform ``k`` (0..7) to the last two axes.

    ``k % 4`` counter-clockwise quarter turns, then a horizontal flip if ``k >= 4``.
    """
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def _transform_sample(s: Sample, k: int) -> Sample:
    mask = None if s.mask is None else dihedral(s.mask, k)
    return replace(s, image=dihedral(s.image, k), mask=mask)


def rot90(s: Sample) -> Sample:
    return _transform_sample(s, 1)


def hflip(s: Sample) -> Sample:
    return _transform_sample(s, 4)


def augment(s: Sample, rng: RngState) -> Sample:
    """Uniformly pick one of the 8 right-angle rotation/flip symmetries."""
    if s.mask is None:
        raise ValueError(f"{s.id}: augmentation needs a mask")
    return _transform_sample(s, int(rng.integers(0, 8)))


def sample_key(sample_id: str) -> int:
    """Stable integer derived from a sample id, used to key per-sample rng streams."""
    return zlib.crc32(sample_id.encode("utf-8"))


# ---------------------------------------------------------------------------
# labels and folds
# ---------------------------------------------------------------------------


def _parse_binary(value: str, row: int, column: str) -> int:
    try:
        v = float(value)
    except ValueError:
        raise IngestionError(f"row {row}: {column} value {value!r} is not a number") from None
    if v not in (0.0, 1.0):
        raise IngestionError(f"row {row}: {column} value {value!r} is not 0 or 1")
    return int(v)


def parse_label_rows(text: str, source: str = "<labels>") -> dict[str, tuple[int, int]]:
    if not text.strip():
        raise IngestionError(f"{source}: empty label file")
    reader = csv.reader(io.StringIO(text, newline=""))
    header = [h.strip() for h in next(reader)]
    missing = [c for c in LABEL_HEADER if c not in header]
    if missing:
        raise IngestionError(f"{source}: header is missing column(s) {missing}")
    ci = [header.index(c) for c in LABEL_HEADER]
    table: dict[str, tuple[int, int]] = {}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise IngestionError(f"{source}: row {rownum} has {len(row)} fields, expected {len(header)}")
        image_id = row[ci[0]].strip()
        mel = _parse_binary(row[ci[1]].strip(), rownum, "melanoma")
        sk = _parse_binary(row[ci[2]].strip(), rownum, "seborrheic_keratosis")
        if mel and sk:
            raise IngestionError(f"{source}: row {rownum} ({image_id}) is labelled both melanoma and seborrheic keratosis")
        if image_id in table:
            raise IngestionError(f"{source}: row {rownum} duplicates image id {image_id!r}")
        table[image_id] = (mel, sk)
    if not table:
        raise IngestionError(f"{source}: no data rows")
    return table


def load_isic_labels(csv_path: str | os.PathLike) -> dict[str, tuple[int, int]]:
    """Read an ISIC-2017 ground-truth CSV into {image_id: (melanoma, sk)}."""
    with open(csv_path, encoding="utf-8", newline="") as f:
        text = f.read()
    return parse_label_rows(text, str(csv_path))


def write_labels(path: str | os.PathLike, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for s in samples:
            w.writerow([s.id, f"{s.label_melanoma:.1f}", f"{s.label_sk:.1f}"])


def make_folds(ds: Dataset, k: int = 5, seed: int = 0) -> Dataset:
    """Stratified k-fold assignment over the 3-way diagnosis.

    Each class's ids are sorted, shuffled with a stream keyed by (seed, class)
    and dealt round-robin; the dealing position carries over between classes
    so total fold sizes also differ by at most one. The result depends only
    on the seed and class membership, not on the order of ``ds.samples``.
    """
    if k < 2:
        raise StratificationError(f"need at least 2 folds, got {k}")
    by_class: list[list[str]] = [[], [], []]
    for s in ds.samples:
        by_class[s.class_index].append(s.id)
    for ci, ids in enumerate(by_class):
        if len(ids) < k:
            raise StratificationError(f"class {CLASS_NAMES[ci]!r} has {len(ids)} samples, fewer than {k} folds")
    folds: dict[str, int] = {}
    pos = 0
    for ci, ids in enumerate(by_class):
        ids = sorted(ids)
        order = RngState(seed, ci).permutation(len(ids))
        for j in order:
            folds[ids[j]] = pos % k
            pos += 1
    return Dataset(list(ds.samples), folds)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

_IMAGE_EXT = (".ppm", ".png")
_MASK_NAMES = ("{id}.pgm", "{id}.png", "{id}_segmentation.png", "{id}_segmentation.pgm")


def save_dataset(ds: Dataset, root: str | os.PathLike) -> None:
    """Write images/<id>.ppm, masks/<id>.pgm and labels.csv under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        write_image(root / "images" / f"{s.id}.ppm", s.image)
        if s.mask is not None:
            write_mask(root / "masks" / f"{s.id}.pgm", s.mask)
    write_labels(root / "labels.csv", ds.samples)


def find_image(directory: Path, image_id: str) -> Path | None:
    for ext in _IMAGE_EXT:
        p = directory / f"{image_id}{ext}"
        if p.exists():
            return p
    return None


def load_sample(image_path, mask_path=None, image_id=None, labels=(0, 0), size: tuple[int, int] | None = None) -> Sample:
    image = read_image(image_path)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    mask = None
    if mask_path is not None:
        raw = read_image(mask_path)
        mask = mask_binarize(raw[:1])
        if mask.shape[1:] != image.shape[1:]:
            mask = resize_nearest(mask, *image.shape[1:])
    if size is not None and image.shape[1:] != tuple(size):
        image = resize_bilinear(image, *size)
        if mask is not None:
            mask = resize_nearest(mask, *size)
    return Sample(image_id or Path(image_path).stem, image, mask, labels[0], labels[1])


def load_dataset(root: str | os.PathLike, size: tuple[int, int] | None = None, require_masks: bool = True) -> Dataset:
    """Load a directory laid out as images/, masks/ and labels.csv.

    ``size`` resizes every sample on load (bilinear images, nearest masks).
    """
    root = Path(root)
    labels = load_isic_labels(root / "labels.csv")
    samples = []
    for image_id, lab in labels.items():
        img_path = find_image(root / "images", image_id)
        if img_path is None:
            raise IngestionError(f"{root}: no image file for {image_id!r} (looked for .ppm/.png)")
        mask_path = None
        for pattern in _MASK_NAMES:
            p = root / "masks" / pattern.format(id=image_id)
            if p.exists():
                mask_path = p
                break
        if mask_path is None and require_masks:
            raise IngestionError(f"{root}: no mask file for {image_id!r}")
        samples.append(load_sample(img_path, mask_path, image_id, lab, size))
    return Dataset(samples)


def stack_samples(samples: Iterable[Sample], size: tuple[int, int] | None = None) -> tuple[np.ndarray, ...]:
    """Normalized images, masks, melanoma and SK labels as batch arrays."""
    images, masks, mel, sk = [], [], [], []
    for s in samples:
        img, mask = s.image, s.mask
        if size is not None and img.shape[1:] != tuple(size):
            img = resize_bilinear(img, *size)
            mask = None if mask is None else resize_nearest(mask, *size)
        images.append(normalize(img))
        masks.append(mask if mask is not None else np.zeros((1,) + img.shape[1:]))
        mel.append(s.label_melanoma)
        sk.append(s.label_sk)
    return (
        np.stack(images),
        np.stack(masks).astype(np.float64),
        np.asarray(mel, dtype=np.float64),
        np.asarray(sk, dtype=np.float64),
    )


def folds_from_mapping(ds: Dataset, assignment: Mapping[str, int]) -> Dataset:
    missing = [i for i in ds.ids if i not in assignment]
    if missing:
        raise StratificationError(f"fold assignment missing ids {missing[:5]}")
    return Dataset(list(ds.samples), {i: int(assignment[i]) for i in ds.ids})

