"""Dataset container plus IDX ingestion/persistence and PNG export.

IDX files follow the public MNIST layout: big-endian magic 0x00000803 for
image tensors and 0x00000801 for label vectors. Gzipped files are detected by
their two magic bytes and handled transparently.
"""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Provenance:
    origin: str  # "primary" or "synthesized"
    cycle: int | None = None
    kind: str | None = None

    @classmethod
    def primary(cls):
        return cls(origin="primary")

    @classmethod
    def synthesized(cls, cycle, kind):
        return cls(origin="synthesized", cycle=cycle, kind=kind)


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1], integer labels, and per-sample origin."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not self.provenance:
            self.provenance = [Provenance.primary()] * len(self.labels)

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        indices = np.asarray(indices)
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            provenance=[self.provenance[i] for i in indices],
        )

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        num_classes = parts[0].num_classes
        prov = []
        for p in parts:
            prov.extend(p.provenance)
        return LabeledDataset(
            images=np.concatenate([p.images for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            num_classes=num_classes,
            provenance=prov,
        )


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _parse_header(raw, expected_magic, path):
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")


def load_idx(images_path, labels_path, num_classes=10):
    """Load an IDX image/label file pair, scaling pixels to [0, 1]."""
    raw_img = _read_bytes(images_path)
    _parse_header(raw_img, IMAGES_MAGIC, images_path)
    if len(raw_img) < 16:
        raise TruncatedFileError(f"{images_path}: header truncated")
    n, h, w = struct.unpack(">III", raw_img[4:16])
    if len(raw_img) != 16 + n * h * w:
        raise TruncatedFileError(
            f"{images_path}: expected {16 + n * h * w} bytes for {n} {h}x{w} images, got {len(raw_img)}")
    images = np.frombuffer(raw_img, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    raw_lbl = _read_bytes(labels_path)
    _parse_header(raw_lbl, LABELS_MAGIC, labels_path)
    if len(raw_lbl) < 8:
        raise TruncatedFileError(f"{labels_path}: header truncated")
    n_lbl = struct.unpack(">I", raw_lbl[4:8])[0]
    if len(raw_lbl) != 8 + n_lbl:
        raise TruncatedFileError(
            f"{labels_path}: expected {8 + n_lbl} bytes for {n_lbl} labels, got {len(raw_lbl)}")
    if n_lbl != n:
        raise CountMismatchError(f"{n} images in {images_path} but {n_lbl} labels in {labels_path}")
    labels = np.frombuffer(raw_lbl, dtype=np.uint8, offset=8).astype(np.int64)

    return LabeledDataset(images=images.astype(np.float32) / 255.0, labels=labels,
                          num_classes=num_classes)


def _write_bytes(path, payload):
    path = str(path)
    if path.endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def save_idx(dataset, images_path, labels_path):
    """Persist a dataset in the IDX container (pixels quantized to uint8)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError(f"IDX image files are single-channel, got {c} channels")
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    _write_bytes(images_path, struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    _write_bytes(labels_path, struct.pack(">II", LABELS_MAGIC, n)
                 + dataset.labels.astype(np.uint8).tobytes())


def subset(dataset, n, seed, stratified=False):
    """Seeded selection of n samples without replacement, optionally the same
    number from every class."""
    if n > len(dataset):
        raise ValueError(f"requested {n} samples from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    if not stratified:
        return dataset.take(rng.permutation(len(dataset))[:n])
    per_class, extra = divmod(n, dataset.num_classes)
    chosen = []
    for cls in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == cls)
        want = per_class + (1 if cls < extra else 0)
        if want > len(pool):
            raise ValueError(f"class {cls} has only {len(pool)} samples, need {want}")
        chosen.append(pool[rng.permutation(len(pool))[:want]])
    return dataset.take(np.concatenate(chosen))


def to_png_array(image):
    """Clamp a (C, H, W) float image into a uint8 (H, W) or (H, W, C) array.
    This is the one place pixel values get clamped."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def export_image_pairs(originals, manipulated, out_dir, labels=None, kinds=None):
    """Write side-by-side (original | manipulated) PNG pairs for inspection."""
    from PIL import Image
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (orig, manip) in enumerate(zip(originals, manipulated)):
        side = np.concatenate([to_png_array(orig), to_png_array(manip)], axis=-1 if orig.shape[0] == 1 else 1)
        tag = "" if labels is None else f"_label{int(labels[i])}"
        kind = "" if kinds is None else f"_{kinds[i]}"
        path = out_dir / f"pair_{i:04d}{tag}{kind}.png"
        Image.fromarray(side).save(path)
        paths.append(path)
    return paths
