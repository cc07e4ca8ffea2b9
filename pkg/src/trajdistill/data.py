"""Labeled datasets, the blob-image generator and the learnable synthetic set."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, IntegrityError, VersionError
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # [n, c, h, w] float32
    labels: np.ndarray  # [n] int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be [n, c, h, w], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<u4").tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()


def blob_centers(class_count: int, image_hw: int) -> np.ndarray:
    """Class centers evenly spaced on a circle of radius hw/4 about the image center."""
    radius = image_hw / 4.0
    angles = 2 * np.pi * np.arange(class_count) / class_count
    mid = (image_hw - 1) / 2.0
    return np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)


def generate_blobs(class_count: int, per_class: int, image_hw: int, seed: int,
                   channels: int = 1, blob_sigma: float = 1.0, jitter: float = 0.5,
                   noise: float = 0.4) -> LabeledDataset:
    """Gaussian intensity blobs at class-specific positions.

    Each sample jitters its blob center and amplitude and adds per-pixel
    Gaussian noise before clipping to [0, 1], so a single sample is a noisy
    view of its class while the class means stay well apart.
    """
    if class_count < 2:
        raise InputError("need at least two classes")
    if per_class < 1:
        raise InputError("per_class must be positive")
    if image_hw < 4:
        raise InputError(f"image size {image_hw} too small for blobs")
    centers = blob_centers(class_count, image_hw)
    spacing = 2 * (image_hw / 4.0) * np.sin(np.pi / class_count)
    if spacing < 1.5:
        raise InputError(
            f"{class_count} classes do not fit distinct centers in a {image_hw}x{image_hw} image")

    rng = np.random.default_rng(seed)
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    pos = centers[labels] + rng.normal(0.0, jitter, size=(n, 2))
    amp = rng.uniform(0.6, 1.0, size=n)
    yy, xx = np.mgrid[0:image_hw, 0:image_hw]
    d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
    blob = amp[:, None, None] * np.exp(-d2 / (2 * blob_sigma ** 2))
    images = blob[:, None] + rng.normal(0.0, noise, size=(n, channels, image_hw, image_hw))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(n)
    return LabeledDataset(images[order], labels[order].astype(np.int64), class_count)


def save_dataset(ds: LabeledDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    (out / "images.bin").write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    (out / "labels.bin").write_bytes(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    manifest = {"format_version": FORMAT_VERSION, "n": n, "c": c, "h": h, "w": w,
                "class_count": ds.class_count, "dtype": "f32le", "labels_dtype": "u32le"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_dataset(path) -> LabeledDataset:
    """Load a dataset directory; ``path`` may be the directory or its manifest.json."""
    path = Path(path)
    directory = path.parent if path.name == "manifest.json" else path
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    if manifest.get("dtype") != "f32le" or manifest.get("labels_dtype") != "u32le":
        raise VersionError("unsupported dataset dtypes")
    n, c, h, w = (int(manifest[k]) for k in ("n", "c", "h", "w"))
    raw_images = (directory / "images.bin").read_bytes()
    raw_labels = (directory / "labels.bin").read_bytes()
    if len(raw_images) != n * c * h * w * 4:
        raise IntegrityError(f"images.bin has {len(raw_images)} bytes, manifest implies {n * c * h * w * 4}")
    if len(raw_labels) != n * 4:
        raise IntegrityError(f"labels.bin holds {len(raw_labels) // 4} labels, manifest says n={n}")
    images = np.frombuffer(raw_images, dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
    try:
        return LabeledDataset(images, labels, int(manifest["class_count"]))
    except InputError as exc:
        raise IntegrityError(str(exc)) from exc


class SyntheticDataset:
    """Learnable images and student learning rate with fixed, class-balanced labels."""

    ALPHA_FLOOR = 1e-6

    def __init__(self, images: np.ndarray, labels: np.ndarray, alpha: float, class_count: int):
        self.images = Tensor(images, requires_grad=True)
        self._labels = np.array(labels, dtype=np.int64)
        self._labels.setflags(write=False)
        self.alpha = Tensor(max(float(alpha), self.ALPHA_FLOOR), requires_grad=True)
        self.class_count = class_count

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def ipc(self) -> int:
        return len(self._labels) // self.class_count

    def clamp_alpha(self):
        if self.alpha.data < self.ALPHA_FLOOR:
            self.alpha.data = np.array(self.ALPHA_FLOOR, dtype=self.alpha.dtype)

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(np.array(self.images.data, dtype=np.float32), self._labels.copy(),
                              self.class_count)

    def image_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images.data).tobytes()).hexdigest()

    def save(self, directory) -> Path:
        out = save_dataset(self.as_labeled(), directory)
        (out / "alpha.json").write_text(json.dumps({"alpha": float(self.alpha.data)}) + "\n")
        return out

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        ds = load_dataset(directory)
        alpha_file = Path(directory) / "alpha.json"
        if not alpha_file.exists():
            raise IntegrityError(f"{alpha_file} missing")
        alpha = json.loads(alpha_file.read_text())["alpha"]
        return cls(ds.images, ds.labels, alpha, ds.class_count)


def sample_per_class(real: LabeledDataset, ipc: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``ipc`` uniformly drawn real samples per class, grouped by class."""
    chosen = []
    for c in range(real.class_count):
        pool = real.class_indices(c)
        if len(pool) < ipc:
            raise InputError(f"class {c} has {len(pool)} samples, fewer than ipc={ipc}")
        chosen.append(rng.choice(pool, size=ipc, replace=False))
    return np.concatenate(chosen)


def init_synthetic(real: LabeledDataset, ipc: int, seed: int, alpha: float = 0.01) -> SyntheticDataset:
    idx = sample_per_class(real, ipc, np.random.default_rng(seed))
    labels = np.repeat(np.arange(real.class_count), ipc)
    return SyntheticDataset(real.images[idx], labels, alpha, real.class_count)
