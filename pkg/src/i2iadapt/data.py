"""Dataset ingestion and the hermetic synthetic domain pairs.

Image datasets arrive either as big-endian IDX files (the digit datasets'
native distribution format) or from the built-in generators: ``shapes_images``
renders glyph classes at 32x32 and shifts the target domain by intensity
inversion, a background ramp, rotation, and noise; ``gaussian_2d`` produces
labeled point clouds with an affine target shift for fast end-to-end runs.
Batching is a pure function of (seed, epoch, step) so training order is
reproducible and resumable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, bilinear_resize_array

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray                  # (N,C,H,W) images or (N,2) points
    labels: Optional[np.ndarray]        # (N,) int64, None when withheld
    domain: str = "source"
    num_classes: int = 0

    def __len__(self):
        return self.images.shape[0]

    def without_labels(self) -> "Dataset":
        """Evaluation keeps the labels; the trainer gets this view."""
        return replace(self, labels=None)

    def validate(self, require_labels: bool = False) -> "Dataset":
        if len(self) == 0:
            raise DataError(f"{self.domain} dataset is empty")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1.0 - 1e-5 or hi > 1.0 + 1e-5:
            raise DataError(f"{self.domain} images outside [-1,1]: range [{lo:.3f}, {hi:.3f}]; run preprocess first")
        if require_labels:
            if self.labels is None:
                raise DataError(f"{self.domain} dataset has no labels")
            if self.labels.shape != (len(self),):
                raise DataError(f"label count {self.labels.shape} != image count {len(self)}")
            if self.num_classes and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError("label outside [0, num_classes)")
        return self


@dataclass
class DomainBatch:
    images: Tensor
    labels: Optional[np.ndarray]
    domain: str


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated IDX file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair (raw 0..255 values)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    if not images_path.exists():
        raise DataError(f"no such file: {images_path}")
    if not labels_path.exists():
        raise DataError(f"no such file: {labels_path}")

    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, "image payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols).astype(np.float32)

    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        lraw = _read_exact(f, lcount, "label payload")
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)

    if lcount != count:
        raise DataError(f"count mismatch: {count} images vs {lcount} labels")
    return Dataset(images=images, labels=labels, num_classes=int(labels.max()) + 1 if count else 0)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Inverse of load_idx, for fixtures and conversions."""
    n, _, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.clip(images, 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def preprocess(ds: Dataset, target_size: int = 32) -> Dataset:
    """Grayscale, aligned-corners bilinear resize, and [0,255] -> [-1,1].

    Idempotent: already-normalized inputs are left alone and same-size
    resizes are exact identities.
    """
    images = ds.images
    if images.ndim != 4:
        return ds
    if images.shape[1] == 3:
        images = np.tensordot(LUMA, images, axes=([0], [1]))[:, None].astype(np.float32)
    if images.max() > 1.0 + 1e-6:
        images = images.astype(np.float32) / 127.5 - 1.0
    if images.shape[2] != target_size or images.shape[3] != target_size:
        images = bilinear_resize_array(images.astype(np.float32), target_size, target_size)
    return replace(ds, images=np.ascontiguousarray(images.astype(np.float32)))


# ---------------------------------------------------------------------------
# synthetic domain pairs
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    kind: str = "shapes_images"         # shapes_images | gaussian_2d
    classes: int = 5
    n_source: int = 1000
    n_target: int = 1000
    rotation_deg: float = 0.0
    invert: bool = False
    background_gradient: float = 0.0
    affine: Optional[list] = None       # 2x2 row-major, gaussian_2d only
    offset: Optional[list] = None       # length 2, gaussian_2d only
    noise_sigma: float = 0.0
    jitter: int = 3
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.kind not in ("shapes_images", "gaussian_2d"):
            raise DataError(f"unknown synthetic kind {self.kind!r}")
        if self.kind == "shapes_images" and self.classes > len(_GLYPHS):
            raise DataError(f"at most {len(_GLYPHS)} glyph classes available, asked for {self.classes}")
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.n_source < 1 or self.n_target < 1:
            raise DataError("sample counts must be positive")
        return self


_SIZE = 32


def _glyph_vbar(u, v, cx, cy):
    return (np.abs(u - cx) <= 2) & (np.abs(v - cy) <= 9)


def _glyph_hbar(u, v, cx, cy):
    return (np.abs(v - cy) <= 2) & (np.abs(u - cx) <= 9)


def _glyph_cross(u, v, cx, cy):
    return _glyph_vbar(u, v, cx, cy) | _glyph_hbar(u, v, cx, cy)


def _glyph_box(u, v, cx, cy):
    du, dv = np.abs(u - cx), np.abs(v - cy)
    outer = (du <= 8) & (dv <= 8)
    inner = (du <= 5) & (dv <= 5)
    return outer & ~inner


def _glyph_diagonal(u, v, cx, cy):
    return (np.abs((u - cx) - (v - cy)) <= 2) & (np.abs(u - cx) <= 9) & (np.abs(v - cy) <= 9)


def _glyph_dot(u, v, cx, cy):
    return (u - cx) ** 2 + (v - cy) ** 2 <= 5.5 ** 2


def _glyph_ring(u, v, cx, cy):
    r2 = (u - cx) ** 2 + (v - cy) ** 2
    return (r2 <= 8.5 ** 2) & (r2 >= 5.0 ** 2)


def _glyph_tee(u, v, cx, cy):
    top = (np.abs(v - cy + 7) <= 2) & (np.abs(u - cx) <= 8)
    stem = (np.abs(u - cx) <= 2) & (v - cy >= -7) & (v - cy <= 9)
    return top | stem


_GLYPHS = (_glyph_vbar, _glyph_hbar, _glyph_cross, _glyph_box,
           _glyph_diagonal, _glyph_dot, _glyph_ring, _glyph_tee)


def glyph_template(class_id: int, cx: float = None, cy: float = None) -> np.ndarray:
    """Render one glyph class at 32x32, background -1, foreground +1."""
    cx = _SIZE / 2 - 0.5 if cx is None else cx
    cy = _SIZE / 2 - 0.5 if cy is None else cy
    v, u = np.mgrid[0:_SIZE, 0:_SIZE]
    mask = _GLYPHS[class_id](u.astype(np.float64), v.astype(np.float64), cx, cy)
    return np.where(mask, 1.0, -1.0).astype(np.float32)


def _rotate_stack(images: np.ndarray, deg: float) -> np.ndarray:
    """Rotate (N,1,S,S) images about the center, bilinear, fill -1."""
    if deg == 0.0:
        return images
    s = images.shape[-1]
    c = (s - 1) / 2.0
    th = np.deg2rad(deg)
    cos, sin = np.cos(th), np.sin(th)
    v, u = np.mgrid[0:s, 0:s].astype(np.float64)
    # inverse map: source coords for each output pixel
    su = cos * (u - c) + sin * (v - c) + c
    sv = -sin * (u - c) + cos * (v - c) + c
    u0 = np.floor(su).astype(np.int64)
    v0 = np.floor(sv).astype(np.int64)
    fu, fv = su - u0, sv - v0
    out = np.full_like(images, -1.0)
    flat = images.reshape(images.shape[0], s, s)
    acc = np.zeros((images.shape[0], s, s), dtype=np.float64)
    for dv in (0, 1):
        for du in (0, 1):
            uu, vv = u0 + du, v0 + dv
            w = (fu if du else 1 - fu) * (fv if dv else 1 - fv)
            valid = (uu >= 0) & (uu < s) & (vv >= 0) & (vv < s)
            uc, vc = np.clip(uu, 0, s - 1), np.clip(vv, 0, s - 1)
            sample = flat[:, vc, uc]
            sample = np.where(valid, sample, -1.0)
            acc += w * sample
    out[:, 0] = acc
    return out.astype(np.float32)


def _background_ramp() -> np.ndarray:
    v, u = np.mgrid[0:_SIZE, 0:_SIZE].astype(np.float32)
    ramp = (u + v) / (2 * (_SIZE - 1))
    return (2.0 * ramp - 1.0).astype(np.float32)


def apply_domain_shift(images: np.ndarray, spec: SyntheticSpec,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Target-domain appearance shift: rotate, invert, add ramp, add noise."""
    out = _rotate_stack(images, spec.rotation_deg)
    if spec.invert:
        out = -out
    if spec.background_gradient != 0.0:
        out = out + np.float32(spec.background_gradient) * _background_ramp()
    if spec.noise_sigma > 0.0 and rng is not None:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape).astype(np.float32)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _render_shapes(n: int, classes: int, jitter: int, rng: np.random.Generator) -> tuple:
    labels = (np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, 1, _SIZE, _SIZE), dtype=np.float32)
    offs = rng.integers(-jitter, jitter + 1, size=(n, 2)) if jitter > 0 else np.zeros((n, 2), dtype=np.int64)
    c = _SIZE / 2 - 0.5
    for i in range(n):
        images[i, 0] = glyph_template(int(labels[i]), cx=c + offs[i, 0], cy=c + offs[i, 1])
    return images, labels


def _gaussian_centroids(classes: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(classes) / classes
    return 0.55 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _sample_gaussian(n: int, classes: int, rng: np.random.Generator) -> tuple:
    labels = (np.arange(n) % classes).astype(np.int64)
    cents = _gaussian_centroids(classes)
    pts = cents[labels] + rng.normal(0.0, 0.07, size=(n, 2))
    return pts.astype(np.float32), labels


def synth_domain_pair(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Source and target datasets drawn from the same label marginal, with
    the target's appearance shifted per the spec.  Both carry labels; the
    trainer must use ``without_labels()`` on the target."""
    spec.validate()
    rng_src = np.random.default_rng(spec.seed * 7919 + 11)
    rng_tgt = np.random.default_rng(spec.seed * 7919 + 500009)
    if spec.kind == "shapes_images":
        src_images, src_labels = _render_shapes(spec.n_source, spec.classes, spec.jitter, rng_src)
        tgt_base, tgt_labels = _render_shapes(spec.n_target, spec.classes, spec.jitter, rng_tgt)
        tgt_images = apply_domain_shift(tgt_base, spec, rng_tgt)
    else:
        src_images, src_labels = _sample_gaussian(spec.n_source, spec.classes, rng_src)
        tgt_base, tgt_labels = _sample_gaussian(spec.n_target, spec.classes, rng_tgt)
        a = np.asarray(spec.affine, dtype=np.float64) if spec.affine is not None else _rotation_matrix(spec.rotation_deg)
        b = np.asarray(spec.offset, dtype=np.float64) if spec.offset is not None else np.zeros(2)
        pts = tgt_base @ a.T + b
        if spec.noise_sigma > 0:
            pts = pts + rng_tgt.normal(0.0, spec.noise_sigma, size=pts.shape)
        tgt_images = np.clip(pts, -1.0, 1.0).astype(np.float32)
    src = Dataset(images=src_images, labels=src_labels, domain="source", num_classes=spec.classes)
    tgt = Dataset(images=tgt_images, labels=tgt_labels, domain="target", num_classes=spec.classes)
    return src.validate(require_labels=True), tgt.validate(require_labels=True)


def _rotation_matrix(deg: float) -> np.ndarray:
    th = np.deg2rad(deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Pure function of (seed, step): seeded per-epoch shuffle, partial tail."""
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    bpe = batches_per_epoch(n, batch_size)
    epoch, k = divmod(step, bpe)
    perm = np.random.default_rng((seed * 1000003 + epoch) % (2**63)).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def batch_at(ds: Dataset, batch_size: int, seed: int, step: int) -> DomainBatch:
    idx = batch_indices(len(ds), batch_size, seed, step)
    return DomainBatch(images=Tensor(ds.images[idx]),
                       labels=None if ds.labels is None else ds.labels[idx],
                       domain=ds.domain)
