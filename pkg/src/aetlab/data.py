"""Dataset loaders (CIFAR-10 binary, IDX) and a synthetic shapes generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, InputError

CIFAR_RECORD = 3073
IDX_UBYTE_IMAGES = 0x00000803
IDX_UBYTE_LABELS = 0x00000801

SHAPE_KINDS = ("bar", "cross", "ring", "ell", "tee", "triangle")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray | None
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 4:
            raise InputError(f"{self.name}: images must be [N, C, H, W], got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise InputError(f"{self.name}: {len(self.labels)} labels for {len(self.images)} images")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise InputError(f"{self.name}: labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.class_count, self.name)


# CIFAR-10 binary -----------------------------------------------------------------


def load_cifar10_binary(path) -> Dataset:
    """Parse 3073-byte records: one label byte, then R, G, B 32x32 planes."""
    buf = Path(path).read_bytes()
    n, rem = divmod(len(buf), CIFAR_RECORD)
    if rem:
        raise FormatError(
            f"{path}: truncated record at byte offset {n * CIFAR_RECORD} "
            f"({rem} of {CIFAR_RECORD} bytes present)"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(float) / 255.0
    return Dataset(images, labels, 10, Path(path).name)


def write_cifar10_binary(path, ds: Dataset) -> None:
    if ds.images.shape[1:] != (3, 32, 32) or ds.labels is None:
        raise InputError("CIFAR-10 binary needs labeled [N, 3, 32, 32] images")
    pix = np.round(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    rec = np.hstack([ds.labels.astype(np.uint8)[:, None], pix])
    Path(path).write_bytes(rec.tobytes())


# IDX ------------------------------------------------------------------------------------


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file.

    Image files (magic 0x803) come back as float arrays scaled to [0, 1];
    label files (magic 0x801) as int64 vectors.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for IDX header at byte offset 0")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_UBYTE_IMAGES, IDX_UBYTE_LABELS):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{path}: truncated IDX dimension header at byte offset 4")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    expected = head + int(np.prod(dims))
    if len(buf) != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte offset {min(len(buf), expected)} "
            f"(expected {expected} bytes, found {len(buf)})"
        )
    data = np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)
    if magic == IDX_UBYTE_LABELS:
        return data.astype(np.int64)
    return data.astype(float) / 255.0


def write_idx(path, array: np.ndarray, labels: bool = False) -> None:
    arr = np.asarray(array)
    if labels:
        if arr.ndim != 1:
            raise InputError("IDX label files hold a 1-D vector")
        payload = arr.astype(np.uint8)
        magic = IDX_UBYTE_LABELS
    else:
        if arr.ndim != 3:
            raise InputError("IDX image files hold [N, H, W] arrays")
        payload = np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8)
        magic = IDX_UBYTE_IMAGES
    head = struct.pack(">I", magic) + struct.pack(f">{payload.ndim}I", *payload.shape)
    Path(path).write_bytes(head + payload.tobytes())


def load_idx_dataset(images_path, labels_path=None, class_count=None, name="idx") -> Dataset:
    images = load_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-D image file, got {images.ndim} dims")
    labels = load_idx(labels_path) if labels_path else None
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None and labels.size else 1
    return Dataset(images[:, None], labels, class_count, name)


# synthetic shapes ---------------------------------------------------------------------------


def _segment_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _shape_segments(kind: str, r: float):
    # segments in the shape's own frame, roughly spanning [-r, r]
    if kind == "bar":
        return [((-r, 0), (r, 0))]
    if kind == "cross":
        return [((-r, 0), (r, 0)), ((0, -r), (0, r))]
    if kind == "ell":
        return [((-r / 2, -r), (-r / 2, r)), ((-r / 2, r), (r, r))]
    if kind == "tee":
        return [((-r, -r), (r, -r)), ((0, -r), (0, r))]
    if kind == "triangle":
        pts = [(r * np.cos(a), r * np.sin(a)) for a in np.deg2rad([-90, 30, 150])]
        return [(pts[i], pts[(i + 1) % 3]) for i in range(3)]
    raise ValueError(kind)


def _render(kind, size, cx, cy, angle, r, stroke, intensity):
    coords = 2.0 * (np.arange(size) + 0.5) / size - 1.0
    px, py = np.meshgrid(coords, coords)
    # into the shape frame
    c, s = np.cos(-angle), np.sin(-angle)
    qx = c * (px - cx) - s * (py - cy)
    qy = s * (px - cx) + c * (py - cy)
    if kind == "ring":
        d = np.abs(np.hypot(qx, qy) - 0.7 * r)
    else:
        d = np.min([_segment_dist(qx, qy, *a, *b) for a, b in _shape_segments(kind, r)], axis=0)
    return intensity * np.exp(-((d / stroke) ** 2))


def synth_shapes(
    n: int,
    size: int,
    class_count: int,
    rng: np.random.Generator,
    blur: float = 0.6,
    max_angle: float = 180.0,
) -> Dataset:
    """Blurred grayscale line-art shapes; the label is the shape kind.

    Each image holds one shape at a random position, size and intensity, turned
    by an angle drawn from [-max_angle, max_angle] degrees away from its upright
    pose.  Labels are stratified: every class gets ``n // class_count`` or one
    more image, in a shuffled order.
    """
    if not 1 <= class_count <= len(SHAPE_KINDS):
        raise InputError(f"class_count must be in [1, {len(SHAPE_KINDS)}], got {class_count}")
    if n < class_count:
        raise InputError(f"need n >= class_count, got n={n}, class_count={class_count}")
    labels = rng.permutation(np.arange(n) % class_count)
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        cx, cy = rng.uniform(-0.35, 0.35, size=2)
        angle = np.deg2rad(rng.uniform(-max_angle, max_angle))
        r = rng.uniform(0.3, 0.5)
        intensity = rng.uniform(0.7, 1.0)
        img = _render(SHAPE_KINDS[lab], size, cx, cy, angle, r, 0.08, intensity)
        if blur:
            img = gaussian_filter(img, blur, mode="constant")
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, class_count, f"shapes{class_count}")
