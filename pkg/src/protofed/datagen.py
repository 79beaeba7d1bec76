"""Dataset sources: Gaussian blobs and IDX (MNIST layout) files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .prototypes import LocalDataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class BlobSpec:
    n_classes: int = 10
    dim: int = 32
    samples_per_class: int = 200
    radius: float = 5.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def blob_centers(spec: BlobSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB10B]))
    raw = rng.normal(size=(spec.n_classes, spec.dim))
    return spec.radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def gen_blobs(spec: BlobSpec) -> LocalDataset:
    """Class k: samples ~ N(center_k, sigma^2 I), centers uniform on the radius sphere.

    Samples are ordered by class.
    """
    centers = blob_centers(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5A3]))
    n = spec.samples_per_class
    feats = np.concatenate([c + spec.sigma * rng.normal(size=(n, spec.dim)) for c in centers])
    labels = np.repeat(np.arange(spec.n_classes), n)
    return LocalDataset(feats, labels)


def _read_header(buf: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise FormatError(f"{what} file truncated in header", len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"bad {what} magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    return struct.unpack_from(f">{ndims}I", buf, 4)


def load_idx(images_path, labels_path, max_n: int | None = None) -> LocalDataset:
    """First ``max_n`` image/label pairs; pixels scaled to [0, 1] and flattened."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(img, IDX_IMAGES_MAGIC, 3, "image")
    (n_lab,) = _read_header(lab, IDX_LABELS_MAGIC, 1, "label")
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels", 4)
    n = n_img if max_n is None else min(max_n, n_img)
    px = rows * cols
    if len(img) < 16 + n * px:
        raise FormatError("image data truncated", len(img))
    if len(lab) < 8 + n:
        raise FormatError("label data truncated", len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * px, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    return LocalDataset(pixels.reshape(n, px).astype(np.float64) / 255.0, labels.astype(np.int64))


def idx_shape(images_path) -> tuple[int, int, int]:
    return _read_header(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, 3, "image")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
