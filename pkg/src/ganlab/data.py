"""Datasets, latent sampling and image-grid output."""
from __future__ import annotations

import gzip
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .rng import RngStream
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images as (N, C, H, W) in [-1, 1], or 2-D points as (N, 2)."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.name.encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def split(self, n_holdout: int):
        """Last ``n_holdout`` samples become a held-out set."""
        keep = len(self) - n_holdout
        if keep <= 0:
            raise ParameterError("hold-out split leaves no training data")
        lab = self.labels
        a = Dataset(self.images[:keep], None if lab is None else lab[:keep],
                    self.name + ":train", self.num_classes, dict(self.meta))
        b = Dataset(self.images[keep:], None if lab is None else lab[keep:],
                    self.name + ":holdout", self.num_classes, dict(self.meta))
        return a, b


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"{path}: truncated payload at byte offset {len(raw)}, "
                          f"expected {header + count} bytes")
    if len(raw) > header + count:
        raise FormatError(f"{path}: {len(raw) - header - count} trailing bytes after offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, name="mnist") -> Dataset:
    """Read big-endian IDX image (and optional label) files.

    Pixels are mapped as x / 127.5 - 1 so 0 -> -1 and 255 -> 1.
    """
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    images = pixels.astype(np.float64)[:, None, :, :] / 127.5 - 1.0
    labels = None
    num_classes = 0
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{labels_path}: {len(labels)} labels at byte offset 4 "
                              f"but {len(images)} images")
        num_classes = 10
    return Dataset(images, labels, name, num_classes)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (3-D -> image file, 1-D -> label file)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def images_to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the load-time pixel map, rounded to uint8."""
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToySpec:
    kind: str = "gaussian_ring"   # or "mini_digits"
    n: int = 10_000
    seed: int = 0
    k: int = 8
    radius: float = 2.0
    sigma: float = 0.02
    noise: float = 0.0            # mini_digits pixel flip probability


def ring_centers(k, radius):
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


_GLYPHS = {
    0: [".###.", "#...#", "#...#", "#...#", "#...#", ".###."],
    1: ["..#..", ".##..", "..#..", "..#..", "..#..", ".###."],
    2: [".###.", "#...#", "...#.", "..#..", ".#...", "#####"],
    3: ["####.", "....#", ".###.", "....#", "....#", "####."],
    4: ["#..#.", "#..#.", "#####", "...#.", "...#.", "...#."],
    5: ["#####", "#....", "####.", "....#", "....#", "####."],
    6: [".###.", "#....", "####.", "#...#", "#...#", ".###."],
    7: ["#####", "....#", "...#.", "..#..", "..#..", "..#.."],
    8: [".###.", "#...#", ".###.", "#...#", "#...#", ".###."],
    9: [".###.", "#...#", "#...#", ".####", "....#", ".###."],
}


def glyph(digit, dy=0, dx=0, size=8):
    """Binary (size x size) bitmap of a 5x6 digit placed at row 1+dy, col 1+dx."""
    img = np.zeros((size, size))
    rows = _GLYPHS[digit]
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "#":
                img[1 + dy + r, 1 + dx + c] = 1.0
    return img


def gen_toy(spec: ToySpec) -> Dataset:
    rng = RngStream(spec.seed, f"toy:{spec.kind}")
    if spec.kind == "gaussian_ring":
        centers = ring_centers(spec.k, spec.radius)
        labels = rng.integers(spec.k, spec.n)
        points = centers[labels] + rng.normal((spec.n, 2), std=spec.sigma)
        return Dataset(points, labels.astype(np.int64), "gaussian_ring", spec.k,
                       {"k": spec.k, "radius": spec.radius, "sigma": spec.sigma, "seed": spec.seed})
    if spec.kind == "mini_digits":
        labels = (np.arange(spec.n) % 10)[rng.permutation(spec.n)]
        dys = rng.integers(3, spec.n) - 1
        dxs = rng.integers(4, spec.n) - 1
        imgs = np.stack([glyph(int(d), int(y), int(x)) for d, y, x in zip(labels, dys, dxs)])
        if spec.noise > 0:
            flips = rng.uniform(0.0, 1.0, imgs.shape) < spec.noise
            imgs = np.where(flips, 1.0 - imgs, imgs)
        images = (imgs * 2.0 - 1.0)[:, None, :, :]
        return Dataset(images, labels.astype(np.int64), "mini_digits", 10,
                       {"noise": spec.noise, "seed": spec.seed})
    raise ParameterError(f"unknown toy dataset {spec.kind!r}")


# ---------------------------------------------------------------------------
# latent sampling
# ---------------------------------------------------------------------------

def sample_z(z_dim, n, rng: RngStream, r=1.0) -> Tensor:
    """z ~ U(-r, r) per dimension."""
    if r <= 0:
        raise ParameterError(f"latent range r must be positive, got {r}")
    return Tensor(rng.uniform(-r, r, (n, z_dim)))


def one_hot(label, k) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label))
    if np.any(labels < 0) or np.any(labels >= k):
        raise ParameterError(f"label {label} out of range for {k} classes")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out[0] if np.ndim(label) == 0 else out


def sample_code(categorical, continuous, n, rng: RngStream):
    """Categorical one-hots (uniform over each k) and continuous U(-1, 1) codes.

    Returns (one_hot_blocks, class_indices, continuous_values) with
    one_hot_blocks of shape (n, sum(categorical)).
    """
    blocks, indices = [], []
    for k in categorical:
        idx = rng.integers(k, n)
        indices.append(idx)
        blocks.append(one_hot(idx, k))
    onehots = np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))
    idx = np.stack(indices, axis=1) if indices else np.zeros((n, 0), dtype=np.int64)
    cont = rng.uniform(-1.0, 1.0, (n, continuous)) if continuous else np.zeros((n, 0))
    return onehots, idx, cont


# ---------------------------------------------------------------------------
# image grids
# ---------------------------------------------------------------------------

def grid_bytes(images, cols) -> np.ndarray:
    """Tile (N,C,H,W) images row-major into a uint8 (rows*H, cols*W, C) canvas."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or len(imgs) < 1:
        raise FormatError(f"expected a non-empty (N,C,H,W) batch, got shape {imgs.shape}")
    n, c, h, w = imgs.shape
    if c not in (1, 3):
        raise FormatError(f"image grids support 1 or 3 channels, got {c}")
    if cols < 1:
        raise ParameterError("cols must be >= 1")
    rows = math.ceil(n / cols)
    canvas = np.full((rows * h, cols * w, c), -1.0)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = imgs[i].transpose(1, 2, 0)
    return images_to_bytes(canvas)


def write_image_grid(images, cols, path):
    """Write a binary PGM (1 channel) or PPM (3 channels) grid."""
    canvas = grid_bytes(images, cols)
    hh, ww, c = canvas.shape
    tag = b"P5" if c == 1 else b"P6"
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(tag + f"\n{ww} {hh}\n255\n".encode())
        fh.write(canvas.tobytes())
    os.replace(tmp, path)


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the files written above; returns (H, W, C) uint8."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    tag, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if tag not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported PNM header")
    c = 1 if tag == b"P5" else 3
    body = raw[len(raw) - w * h * c:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def load_dataset(dcfg):
    """Build (train, holdout or None) from a DatasetConfig-like object.

    Missing IDX files raise FileNotFoundError before anything is read.
    """
    if dcfg.kind == "mnist":
        for p in (dcfg.images, dcfg.labels):
            if p and not os.path.exists(p):
                raise FileNotFoundError(f"dataset file not found: {p}")
        data = load_idx(dcfg.images, dcfg.labels)
        if dcfg.n and dcfg.n < len(data):
            data = Dataset(data.images[:dcfg.n], None if data.labels is None else data.labels[:dcfg.n],
                           data.name, data.num_classes)
    else:
        kind = "gaussian_ring" if dcfg.kind == "ring" else dcfg.kind
        data = gen_toy(ToySpec(kind, dcfg.n, dcfg.seed, dcfg.k, dcfg.radius, dcfg.sigma, dcfg.noise))
    if dcfg.holdout:
        return data.split(dcfg.holdout)
    return data, None
