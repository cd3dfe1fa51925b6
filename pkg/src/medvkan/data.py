"""Synthetic datasets, the ``.vkt`` tensor file format and dataset manifests."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .init import make_rng

TENSOR_MAGIC = b"VKT1"
DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int64): 3,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}
SIZE_MULTIPLE = 32


class TensorFormatError(ValueError):
    """Base class for malformed ``.vkt`` payloads."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # in_ch×H×W float32 in [0, 1]
    label: np.ndarray  # H×W integer class mask

    def validate(self, num_classes: int | None = None):
        if self.image.ndim != 3 or self.label.ndim != 2:
            raise ValueError(f"image must be C×H×W and label H×W, got {self.image.shape} and {self.label.shape}")
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"image spatial dims {self.image.shape[1:]} != label dims {self.label.shape}")
        h, w = self.label.shape
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {SIZE_MULTIPLE}")
        if num_classes is not None and self.label.size and (self.label.min() < 0 or self.label.max() >= num_classes):
            raise ValueError(f"label values outside [0, {num_classes})")


# -- tensor framing ----------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in DTYPE_CODES:
        raise UnknownDtypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = TENSOR_MAGIC + struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def decode_tensor(buf, offset=0):
    """Parse one framed tensor from ``buf`` at ``offset``; returns (array, new_offset)."""
    view = memoryview(buf)
    if len(view) - offset < 6:
        raise TruncatedError("tensor header truncated")
    if bytes(view[offset:offset + 4]) != TENSOR_MAGIC:
        raise BadMagicError(f"bad tensor magic {bytes(view[offset:offset + 4])!r}")
    code, ndim = struct.unpack_from("<BB", view, offset + 4)
    if code not in CODE_DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    pos = offset + 6
    if len(view) - pos < 8 * ndim:
        raise TruncatedError("tensor shape truncated")
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) - pos < nbytes:
        raise TruncatedError(f"tensor payload truncated: need {nbytes} bytes, have {len(view) - pos}")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return arr, pos + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor")
    return arr


# -- synthetic data ----------------------------------------------------------

def _draw_shape(rng, size):
    cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
    ry, rx = rng.uniform(size / 8, size / 4, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def synth_sample(seed, index, size, num_classes, in_channels=1, shapes_per_class=1) -> Sample:
    rng = make_rng(seed, index)
    image = rng.normal(0.3, 0.1, size=(size, size))
    label = np.zeros((size, size), dtype=np.uint8)
    for c in range(1, num_classes):
        center = 0.3 + 0.5 * c / num_classes
        for _ in range(shapes_per_class):
            region = _draw_shape(rng, size)
            image[region] = rng.uniform(center - 0.05, center + 0.05) + rng.normal(0.0, 0.02, size=int(region.sum()))
            label[region] = c
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(np.repeat(image[None], in_channels, axis=0), label)


def synth_dataset(seed, n_samples, size, num_classes, in_channels=1, shapes_per_class=1) -> list[Sample]:
    """Noisy background with one randomly placed ellipse or rectangle per class.

    Class ``c`` is painted at intensity ~0.3 + 0.5c/K; later classes overwrite
    earlier ones.  Sample ``i`` depends only on ``(seed, i)``.
    """
    if size <= 0 or size % SIZE_MULTIPLE:
        raise ValueError(f"size must be a positive multiple of {SIZE_MULTIPLE}, got {size}")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    return [synth_sample(seed, i, size, num_classes, in_channels, shapes_per_class) for i in range(n_samples)]


# -- manifests ---------------------------------------------------------------

@dataclass
class Manifest:
    num_classes: int
    entries: list  # (image_path, label_path)
    split: str = "train"


def write_dataset(samples, out_dir, num_classes, split="train") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img, lab = f"image_{i:04d}.vkt", f"label_{i:04d}.vkt"
        write_tensor(out / img, s.image.astype(np.float32))
        write_tensor(out / lab, s.label.astype(np.uint8))
        entries.append({"image": img, "label": lab})
    path = out / "manifest.json"
    path.write_text(json.dumps({"num_classes": num_classes, "split": split, "samples": entries}, indent=2))
    return path


def load_manifest(path):
    """Load and validate every sample listed in a manifest; returns (Manifest, samples)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "num_classes" not in doc or "samples" not in doc:
        raise ManifestError("manifest needs 'num_classes' and 'samples' keys")
    k = int(doc["num_classes"])
    base = path.parent
    samples, entries, problems = [], [], []
    for i, entry in enumerate(doc["samples"]):
        try:
            img_path, lab_path = base / entry["image"], base / entry["label"]
            sample = Sample(read_tensor(img_path), read_tensor(lab_path))
            sample.validate(k)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"sample {i}: {exc}")
            continue
        samples.append(sample)
        entries.append((str(img_path), str(lab_path)))
    if problems:
        raise ManifestError("invalid manifest entries:\n  " + "\n  ".join(problems))
    return Manifest(k, entries, doc.get("split", "train")), samples
