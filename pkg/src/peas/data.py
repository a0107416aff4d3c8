"""Dataset readers (CIFAR-10 binary, IDX, raw tensor files) and a synthetic generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import DTYPE, LabeledSample

PRESETS = ("high-res", "low-res")
FORMATS = ("cifar10-binary", "idx", "raw-tensor-dir")

RAW_MAGIC = b"PEASIMG1"
RAW_HEADER = struct.Struct("<8s4I")  # magic, C, H, W, label
RAW_SUFFIX = ".pimg"

CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    shape: tuple
    num_classes: int
    preset: str = "low-res"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.shape) != 3:
            raise ValueError(f"image shape must be (C, H, W), got {self.shape}")

    def to_dict(self):
        return {"name": self.name, "shape": list(self.shape), "num_classes": self.num_classes, "preset": self.preset}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["shape"]), int(d["num_classes"]), d.get("preset", "low-res"))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_cifar10_batch(path) -> list[LabeledSample]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise DatasetFormatError(f"{path}: truncated record at byte offset {offset}")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(buf[:, 0] > 9)
    if bad.size:
        raise DatasetFormatError(f"{path}: label {buf[bad[0], 0]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = buf[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / 255.0
    return [LabeledSample(img, int(lbl)) for img, lbl in zip(images, buf[:, 0])]


def write_cifar10_batch(path, samples):
    with open(path, "wb") as fh:
        for img, label in samples:
            fh.write(bytes([label]))
            fh.write(np.round(np.asarray(img) * 255).astype(np.uint8).tobytes())


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its stored shape."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated magic at byte offset 0")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad magic 0x{raw[:4].hex()} at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_TYPES[type_code])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise DatasetFormatError(
            f"{path}: payload of {len(raw) - header_end} bytes, expected {expected} (data starts at byte offset {header_end})"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def idx_samples(images: np.ndarray, labels: np.ndarray | None = None) -> list[LabeledSample]:
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DatasetFormatError(f"IDX image array must have 3 or 4 dims, got shape {images.shape}")
    if labels is None:
        labels = np.zeros(len(images), dtype=np.int64)
    if len(labels) != len(images):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    x = images.astype(DTYPE) / scale
    return [LabeledSample(img, int(lbl)) for img, lbl in zip(x, labels)]


def write_raw_tensor(path, image: np.ndarray, label: int):
    image = np.asarray(image, dtype="<f4")
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, c, h, w, int(label)))
        fh.write(image.tobytes())


def read_raw_tensor(path) -> LabeledSample:
    raw = Path(path).read_bytes()
    if len(raw) < RAW_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, c, h, w, label = RAW_HEADER.unpack_from(raw)
    if magic != RAW_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    expected = RAW_HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, file ends at byte offset {len(raw)}")
    img = np.frombuffer(raw, dtype="<f4", offset=RAW_HEADER.size).reshape(c, h, w).astype(DTYPE)
    return LabeledSample(img, int(label))


def read_raw_tensor_dir(path) -> list[LabeledSample]:
    return [read_raw_tensor(p) for p in sorted(Path(path).glob(f"*{RAW_SUFFIX}"))]


def write_raw_tensor_dir(path, samples):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(samples):
        write_raw_tensor(path / f"{i:06d}{RAW_SUFFIX}", img, label)


def _find(path: Path, *names):
    for name in names:
        for cand in (path / name, path / f"{name}.gz"):
            if cand.exists():
                return cand
    return None


def load_dataset(path, format: str):
    """Load ``(train, test)`` sample lists; pixels are scaled to [0, 1].

    * ``cifar10-binary``: a directory holding ``data_batch_*.bin`` and
      ``test_batch.bin``, or a single batch file (returned as train).
    * ``idx``: a directory with the MNIST-style ``train-images-idx3-ubyte`` /
      ``train-labels-idx1-ubyte`` / ``t10k-*`` files, or a single image file.
    * ``raw-tensor-dir``: ``train/`` and ``test/`` subdirectories of ``.pimg``
      files, or a flat directory (returned as train).
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)

    if format == "cifar10-binary":
        if path.is_file():
            return read_cifar10_batch(path), []
        train = [s for f in sorted(path.glob("data_batch_*.bin")) for s in read_cifar10_batch(f)]
        test = read_cifar10_batch(path / "test_batch.bin") if (path / "test_batch.bin").exists() else []
        return train, test

    if format == "idx":
        if path.is_file():
            return idx_samples(read_idx(path)), []
        splits = []
        for prefix in ("train", "t10k"):
            images = _find(path, f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte")
            labels = _find(path, f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte")
            if images is None:
                splits.append([])
                continue
            splits.append(idx_samples(read_idx(images), read_idx(labels) if labels else None))
        return splits[0], splits[1]

    if (path / "train").is_dir() or (path / "test").is_dir():
        return (
            read_raw_tensor_dir(path / "train") if (path / "train").is_dir() else [],
            read_raw_tensor_dir(path / "test") if (path / "test").is_dir() else [],
        )
    return read_raw_tensor_dir(path), []


def save_dataset(data, path, format: str = "raw-tensor-dir") -> Path:
    """Write ``(train, test)`` in a layout :func:`load_dataset` reads back.

    ``cifar10-binary`` and ``idx`` store 8-bit pixels, so a round trip
    quantizes to multiples of 1/255; ``raw-tensor-dir`` is exact.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    train, test = data
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if format == "raw-tensor-dir":
        write_raw_tensor_dir(path / "train", train)
        write_raw_tensor_dir(path / "test", test)
    elif format == "cifar10-binary":
        for split in (train, test):
            if split and np.shape(split[0][0]) != (3, 32, 32):
                raise ValueError(f"cifar10-binary stores 3x32x32 images, got {np.shape(split[0][0])}")
        write_cifar10_batch(path / "data_batch_1.bin", train)
        write_cifar10_batch(path / "test_batch.bin", test)
    else:
        for prefix, split in (("train", train), ("t10k", test)):
            if not split:
                continue
            images = np.stack([np.round(np.asarray(img) * 255) for img, _ in split])
            write_idx(path / f"{prefix}-images-idx3-ubyte", images)
            write_idx(path / f"{prefix}-labels-idx1-ubyte", np.array([lbl for _, lbl in split]))
    return path


# ---------------------------------------------------------------------------
# synthetic patterns
# ---------------------------------------------------------------------------

PATTERNS = (
    "hbars",
    "vbars",
    "disk",
    "ring",
    "plus",
    "checker",
    "diagonal",
    "square",
    "xcross",
    "triangle",
)


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    shape: tuple = (3, 32, 32)
    per_class: int = 100
    seed: int = 0
    test_per_class: int | None = None
    noise: float = 0.04
    contrast: tuple = (0.1, 0.25)  # foreground brightness above background
    background: tuple = (0.05, 0.45)


def _pattern_mask(kind, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    cy = h / 2 + rng.uniform(-0.12, 0.12) * h
    cx = w / 2 + rng.uniform(-0.12, 0.12) * w
    r = scale * rng.uniform(0.22, 0.34)
    thick = max(1.0, scale * rng.uniform(0.06, 0.1))
    # stripes are anchored at the pattern centre so every class is a rigid shape
    period = r * rng.uniform(0.6, 0.8)
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "hbars":
        return inside & ((dy / period + 0.25) % 1 < 0.5)
    if kind == "vbars":
        return inside & ((dx / period + 0.25) % 1 < 0.5)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - thick)
    if kind == "plus":
        return inside & ((np.abs(dy) <= thick / 2 + 0.5) | (np.abs(dx) <= thick / 2 + 0.5))
    if kind == "checker":
        return inside & ((np.floor(dy / period + 0.5) + np.floor(dx / period + 0.5)) % 2 == 0)
    if kind == "diagonal":
        return inside & (((dx + dy) / (period * 1.4) + 0.25) % 1 < 0.5)
    if kind == "square":
        return inside & ~((np.abs(dy) <= r - thick) & (np.abs(dx) <= r - thick))
    if kind == "xcross":
        return inside & ((np.abs(dy - dx) <= thick * 0.75) | (np.abs(dy + dx) <= thick * 0.75))
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(kind)


def _render(kind, shape, rng, noise, contrast, background):
    c, h, w = shape
    mask = _pattern_mask(kind, h, w, rng).astype(np.float64)
    # foreground and background colours kept apart in brightness so every class stays visible
    bg = np.clip(rng.uniform(*background) + rng.uniform(-0.1, 0.1, size=c), 0, 1)
    # per-channel tint that never flips the sign of the contrast
    fg = np.clip(bg + rng.uniform(*contrast) * rng.uniform(0.7, 1.3, size=c), 0, 1)
    tilt = 0.08 * (contrast[1] / 0.5)
    grad = np.linspace(-1, 1, w)[None, :] * rng.uniform(-tilt, tilt) + np.linspace(-1, 1, h)[:, None] * rng.uniform(-tilt, tilt)
    img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask + grad[None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def generate_synthetic_dataset(spec: SyntheticSpec | dict):
    """Deterministic ``(train, test)`` split of noisy geometric pattern classes."""
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    c, h, w = spec.shape
    if h < 8 or w < 8:
        raise ValueError(f"synthetic images need H, W >= 8, got {spec.shape}")
    if not 2 <= spec.num_classes <= len(PATTERNS):
        raise ValueError(f"num_classes must be in [2, {len(PATTERNS)}], got {spec.num_classes}")
    if spec.per_class < 2:
        raise ValueError("per_class must be at least 2")
    n_test = spec.test_per_class if spec.test_per_class is not None else max(1, spec.per_class // 2)
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for split, count in ((train, spec.per_class), (test, n_test)):
        for _ in range(count):
            for k in range(spec.num_classes):
                split.append(LabeledSample(_render(PATTERNS[k], (c, h, w), rng, spec.noise, tuple(spec.contrast), tuple(spec.background)), k))
    # interleave classes deterministically
    perm = rng.permutation(len(train))
    train = [train[i] for i in perm]
    return train, test
