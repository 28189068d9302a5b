"""Desk-scale data ingestion: IDX image files, CSV tables, synthetic blobs.

Datasets hold a list of equally-shaped sample batches (as Tensors) plus
optional integer labels per batch and a manifest describing provenance.
All loaders are deterministic; pixel values are scaled into [0, 1] at
load so dynamic ranges are declared, not guessed.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .seeding import derive_rng
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    batches: list[Tensor]
    labels: list[np.ndarray] | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.batches:
            raise DomainError("dataset has no batches")
        shapes = {b.shape[1:] for b in self.batches}
        if len(shapes) != 1:
            raise DataError(f"batches disagree on sample shape: {sorted(shapes)}")
        if self.labels is not None:
            if len(self.labels) != len(self.batches):
                raise DataError("label batch count != sample batch count")
            for b, l in zip(self.batches, self.labels):
                if b.shape[0] != len(l):
                    raise DataError("labels per batch != samples per batch")

    @property
    def n_samples(self) -> int:
        return sum(b.shape[0] for b in self.batches)

    @property
    def sample_shape(self) -> tuple:
        return self.batches[0].shape[1:]

    def flat_samples(self) -> np.ndarray:
        return np.concatenate([b.data for b in self.batches], axis=0)

    def flat_labels(self) -> np.ndarray | None:
        if self.labels is None:
            return None
        return np.concatenate(self.labels)


def from_arrays(samples: np.ndarray, labels: np.ndarray | None,
                batch_size: int, manifest: dict | None = None) -> Dataset:
    """Batch a sample array [n, ...] into a Dataset, preserving order."""
    n = samples.shape[0]
    if n == 0:
        raise DomainError("cannot build a dataset from zero samples")
    batches, lab_batches = [], []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batches.append(Tensor(samples[start:stop]))
        if labels is not None:
            lab_batches.append(np.asarray(labels[start:stop], dtype=np.int64))
    return Dataset(batches=batches,
                   labels=lab_batches if labels is not None else None,
                   manifest=dict(manifest or {}))


# ---------------------------------------------------------------------------
# IDX (big-endian) image/label containers


def _read_idx_header(buf: bytes, path: str, expect_magic: int, ndim: int):
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise DataError(f"{path}: truncated header at byte {len(buf)} (need {need})")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expect_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0 "
                        f"(expected 0x{expect_magic:08x})")
    dims = struct.unpack(">" + "I" * ndim, buf[4:need])
    return dims, need


def load_idx(image_path: str, label_path: str | None = None,
             batch_size: int = 64) -> Dataset:
    """Load big-endian IDX images (and labels); pixels scaled to [0, 1]."""
    try:
        with open(image_path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"{image_path}: {e}") from None
    (n, h, w), off = _read_idx_header(buf, image_path, IDX_IMAGE_MAGIC, 3)
    expected = off + n * h * w
    if len(buf) < expected:
        raise DataError(f"{image_path}: truncated at byte {len(buf)} (need {expected})")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=off)
    samples = (pixels.reshape(n, 1, h, w).astype(np.float32) / 255.0)

    labels = None
    if label_path is not None:
        try:
            with open(label_path, "rb") as f:
                lbuf = f.read()
        except OSError as e:
            raise DataError(f"{label_path}: {e}") from None
        (nl,), loff = _read_idx_header(lbuf, label_path, IDX_LABEL_MAGIC, 1)
        if nl != n:
            raise DataError(f"{label_path}: {nl} labels for {n} images")
        if len(lbuf) < loff + nl:
            raise DataError(f"{label_path}: truncated at byte {len(lbuf)}")
        labels = np.frombuffer(lbuf, dtype=np.uint8, count=nl, offset=loff).astype(np.int64)

    manifest = {"name": "idx", "shape": [1, h, w], "dynamic_range": 1.0,
                "n_samples": int(n), "seed": None}
    return from_arrays(samples, labels, batch_size, manifest)


def write_idx_images(path: str, images: np.ndarray):
    """Write uint8 images [n, h, w] as an IDX file (test fixtures, exports)."""
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: str, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CSV feature tables


def load_csv(path: str, label_column: str | None = None,
             batch_size: int = 64) -> Dataset:
    """Load a numeric CSV with header row into flat feature vectors."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    header = list(rows[0].keys())
    if label_column is not None and label_column not in header:
        raise DataError(f"{path}: no column {label_column!r}")
    feat_cols = [c for c in header if c != label_column]
    try:
        samples = np.array([[float(r[c]) for c in feat_cols] for r in rows],
                           dtype=np.float32)
        labels = (np.array([int(float(r[label_column])) for r in rows], dtype=np.int64)
                  if label_column else None)
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: non-numeric value ({e})") from None
    manifest = {"name": "csv", "shape": [len(feat_cols)], "dynamic_range": None,
                "n_samples": len(rows), "seed": None}
    return from_arrays(samples, labels, batch_size, manifest)


# ---------------------------------------------------------------------------
# synthetic generators


def synth_blobs(classes: int, samples_per_class: int, dims,
                seed: int = 0, spread: float = 5.0,
                batch_size: int = 32, center_seed: int | None = None) -> Dataset:
    """Seeded Gaussian clusters, one per class, unit noise around centers.

    `dims` may be an int (flat features) or a shape tuple (image-like
    samples). Default spread keeps classes linearly separable. The class
    centers draw from `center_seed` (default: `seed`), so train and test
    splits of the same task share centers but not noise.
    """
    if classes < 1 or samples_per_class < 1:
        raise DomainError("classes and samples_per_class must be positive")
    shape = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
    flat = int(np.prod(shape))
    rng = derive_rng(seed, "blobs")
    center_rng = derive_rng(seed if center_seed is None else center_seed,
                            "blobs-centers")

    centers = center_rng.normal(size=(classes, flat))
    centers *= spread / np.linalg.norm(centers, axis=1, keepdims=True)
    n = classes * samples_per_class
    labels = np.repeat(np.arange(classes), samples_per_class)
    samples = centers[labels] + rng.normal(size=(n, flat))
    order = rng.permutation(n)
    samples = samples[order].astype(np.float32).reshape((n,) + shape)
    labels = labels[order]

    manifest = {"name": "blobs", "shape": list(shape), "dynamic_range": None,
                "classes": classes, "n_samples": n, "seed": seed,
                "center_seed": center_seed if center_seed is not None else seed,
                "spread": spread}
    return from_arrays(samples, labels, batch_size, manifest)


# ---------------------------------------------------------------------------
# subsetting (attacker's partial data)


def subset(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Seeded sample without replacement, stratified by label when present."""
    if not 0 < fraction <= 1:
        raise DomainError(f"fraction {fraction} outside (0, 1]")
    n = dataset.n_samples
    want = max(1, int(round(fraction * n)))
    samples = dataset.flat_samples()
    labels = dataset.flat_labels()
    rng = derive_rng(seed, "subset")

    if labels is None:
        idx = np.sort(rng.choice(n, size=want, replace=False))
    else:
        idx = _stratified_indices(labels, want, rng)

    batch_size = dataset.batches[0].shape[0]
    manifest = dict(dataset.manifest)
    manifest.update({"subset_fraction": fraction, "subset_seed": seed,
                     "n_samples": int(want)})
    return from_arrays(samples[idx], labels[idx] if labels is not None else None,
                       batch_size, manifest)


def _stratified_indices(labels: np.ndarray, want: int, rng) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * (want / len(labels))
    take = np.floor(exact).astype(int)
    remainder = exact - take
    short = want - take.sum()
    for c in np.argsort(-remainder)[:short]:
        take[c] += 1
    chosen = []
    for cls, k in zip(classes, take):
        pool = np.flatnonzero(labels == cls)
        if k > 0:
            chosen.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)


# ---------------------------------------------------------------------------
# config-driven dispatch (used by the CLI)


def load_dataset(spec: dict) -> Dataset:
    kind = spec.get("kind")
    batch_size = int(spec.get("batch_size", 64))
    if kind == "blobs":
        center_seed = spec.get("center_seed")
        return synth_blobs(int(spec["classes"]), int(spec["samples_per_class"]),
                           spec.get("shape", spec.get("dims", 8)),
                           seed=int(spec.get("seed", 0)),
                           spread=float(spec.get("spread", 5.0)),
                           batch_size=batch_size,
                           center_seed=None if center_seed is None else int(center_seed))
    if kind == "idx":
        return load_idx(spec["images"], spec.get("labels"), batch_size=batch_size)
    if kind == "csv":
        return load_csv(spec["path"], spec.get("label_column"), batch_size=batch_size)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def manifest_json(dataset: Dataset) -> str:
    return json.dumps(dataset.manifest, indent=1, sort_keys=True)
