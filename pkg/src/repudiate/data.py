"""Datasets, mini-batch specs, batch schedules and split plans.

Features are always stored as an ``(n, d)`` float64 matrix.  Image datasets
additionally carry ``image_shape = (H, W, C)`` so that flip augmentation can
reshape rows back to images.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_CONTAINER_MAGIC = b"RPDS"
_CONTAINER_VERSION = 1


class DataFormatError(ValueError):
    """Raised for malformed IDX files or dataset containers."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    image_shape: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be an (n, d) matrix")
        if len(feats) < 1 or len(labels) != len(feats):
            raise ValueError("need n >= 1 and one label per row")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if labels.min() < 0 or labels.max() >= self.classes:
            raise ValueError("label out of range")
        if not np.all(np.isfinite(feats)):
            raise ValueError("non-finite feature value")
        if self.image_shape is not None and math.prod(self.image_shape) != feats.shape[1]:
            raise ValueError("image_shape does not match feature width")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes, self.image_shape, self.seed)

    def append(self, x, y: int) -> Dataset:
        """Return a copy with one extra sample at index ``n``."""
        feats = np.vstack([self.features, np.asarray(x, dtype=np.float64).reshape(1, -1)])
        labels = np.append(self.labels, int(y))
        return Dataset(feats, labels, self.classes, self.image_shape, self.seed)

    def gather(self, batch: MiniBatchSpec) -> tuple[np.ndarray, np.ndarray]:
        """Features and labels of a batch, flips applied, rows in ascending index order."""
        order = np.argsort(batch.indices, kind="stable")
        idx = np.asarray(batch.indices, dtype=np.int64)[order]
        x = self.features[idx]
        flags = np.asarray(batch.flips, dtype=bool)[order]
        if flags.any():
            x = flip_rows(x, flags, self.image_shape)
        return x, self.labels[idx]


@dataclass(frozen=True)
class MiniBatchSpec:
    indices: tuple[int, ...]
    flips: tuple[int, ...] = ()

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        flips = tuple(int(f) for f in self.flips) if self.flips else (0,) * len(idx)
        if len(flips) != len(idx):
            raise ValueError("one flip flag per index required")
        if len(set(idx)) != len(idx):
            raise ValueError("indices within a batch must be distinct")
        if any(f not in (0, 1) for f in flips):
            raise ValueError("flip flags must be 0 or 1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "flips", flips)

    @property
    def size(self) -> int:
        return len(self.indices)

    def validate(self, n: int) -> None:
        if any(i < 0 or i >= n for i in self.indices):
            raise IndexError(f"batch index out of range for n={n}")

    def to_json(self) -> dict:
        return {"indices": list(self.indices), "flips": "".join(map(str, self.flips))}

    @classmethod
    def from_json(cls, obj: dict) -> MiniBatchSpec:
        return cls(tuple(obj["indices"]), tuple(int(c) for c in obj["flips"]))


@dataclass(frozen=True)
class BatchSchedule:
    batches: list[MiniBatchSpec]
    seed: int

    def __len__(self) -> int:
        return len(self.batches)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Static λ-groups plus a per-step assignment of groups to κ splits.

    ``groups[g]`` lists the sample indices of group ``g``;
    ``assignment[t - 1, g]`` is the split holding group ``g`` at step ``t``.
    """

    n: int
    lam: int
    kappa: int
    seed: int
    groups: np.ndarray
    assignment: np.ndarray
    group_of: np.ndarray = field(repr=False)

    @property
    def steps(self) -> int:
        return self.assignment.shape[0]

    @property
    def group_count(self) -> int:
        return self.groups.shape[0]

    def split_groups(self, t: int, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment[t - 1] == k)

    def split_members(self, t: int, k: int) -> np.ndarray:
        return np.sort(self.groups[self.split_groups(t, k)].ravel())

    def split_mask(self, t: int, k: int) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.groups[self.split_groups(t, k)].ravel()] = True
        return mask


# ---------------------------------------------------------------- IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{what}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    expected = math.prod(dims)
    payload = raw[header_len:]
    if len(payload) < expected:
        raise DataFormatError(f"{what}: truncated payload ({len(payload)} < {expected} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Load an MNIST-style IDX image/label pair (plain or gzip) scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise DataFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    n, rows, cols = images.shape
    feats = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), classes, (rows, cols, 1))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in uncompressed IDX."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --------------------------------------------------------- synthetic data


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def synth_gaussian(n: int, d: int, c: int, seed: int, class_separation: float) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means sit at pairwise distance ``class_separation`` when ``c <= d``
    (scaled orthonormal directions); otherwise on random unit directions.
    """
    if n < c:
        raise ValueError("need n >= c")
    rng = np.random.default_rng(seed)
    if c <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, c)))
        means = class_separation / math.sqrt(2.0) * q.T
    else:
        dirs = rng.normal(size=(c, d))
        means = class_separation / 2.0 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = _balanced_labels(n, c, rng)
    feats = means[labels] + rng.normal(size=(n, d))
    return Dataset(feats, labels, c, seed=seed)


def synth_subspace(n: int, d: int, seed: int) -> tuple[Dataset, int, np.ndarray]:
    """Binary dataset where samples 1..n-1 lie in span(e_1..e_{d-1}) and sample 0 does not.

    Returns ``(dataset, outlier_index, basis)`` with ``basis`` of shape ``(d-1, d)``.
    """
    if d < 2 or n < 3:
        raise ValueError("need d >= 2 and n >= 3")
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, d))
    feats[1:, -1] = 0.0
    off = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
    feats[0, -1] = off
    labels = rng.integers(0, 2, size=n)
    basis = np.eye(d)[: d - 1]
    return Dataset(feats, labels, 2, seed=seed), 0, basis


def dist_to_subspace(x, basis) -> float:
    """Euclidean distance from ``x`` to the span of the rows of ``basis``."""
    x = np.asarray(x, dtype=np.float64)
    basis = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    q, r = np.linalg.qr(basis.T)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= 1e-12 * max(1.0, diag.max()):
        raise ValueError("degenerate subspace basis")
    resid = x - q @ (q.T @ x)
    return float(np.linalg.norm(resid))


# ------------------------------------------------------------ augmentation


def apply_flip(images: np.ndarray, flip_flags) -> np.ndarray:
    """Reverse flagged images along the width axis.

    ``images`` has shape ``(b, H, W)`` or ``(b, H, W, C)``.
    """
    images = np.asarray(images)
    flags = np.asarray(flip_flags, dtype=bool)
    if images.ndim < 3:
        if flags.any():
            raise ValueError("cannot flip non-image features")
        return images.copy()
    out = images.copy()
    out[flags] = images[flags][:, :, ::-1, ...]
    return out


def flip_rows(rows: np.ndarray, flags, image_shape) -> np.ndarray:
    if image_shape is None:
        if np.any(flags):
            raise ValueError("cannot flip non-image features")
        return rows
    b = rows.shape[0]
    return apply_flip(rows.reshape(b, *image_shape), flags).reshape(b, -1)


# ------------------------------------------------------- batch schedules


def make_schedule(n: int, b: int, epochs: int, seed: int, augment: bool = False,
                  steps: int | None = None) -> BatchSchedule:
    """Per-epoch seeded permutation chunked into batches of ``b``.

    A trailing remainder of ``n mod b`` samples is dropped each epoch.  With
    ``steps`` the schedule is truncated to that many batches.
    """
    if b < 1 or b > n:
        raise ValueError("batch size must be in [1, n]")
    rng = np.random.default_rng(seed)
    per_epoch = n // b
    batches = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        flips = rng.integers(0, 2, size=per_epoch * b) if augment else np.zeros(per_epoch * b, dtype=int)
        for j in range(per_epoch):
            sl = slice(j * b, (j + 1) * b)
            batches.append(MiniBatchSpec(tuple(perm[sl]), tuple(flips[sl])))
    if steps is not None:
        if steps > len(batches):
            raise ValueError("not enough epochs for the requested step count")
        batches = batches[:steps]
    return BatchSchedule(batches, seed)


def schedule_for_steps(n: int, b: int, steps: int, seed: int, augment: bool = False) -> BatchSchedule:
    per_epoch = n // b
    return make_schedule(n, b, -(-steps // per_epoch), seed, augment, steps)


def sample_iid_batches(n: int, b: int, steps: int, seed: int) -> list[MiniBatchSpec]:
    """Independent batches, each a uniform b-subset: the without-replacement baseline."""
    rng = np.random.default_rng(seed)
    keys = rng.random((steps, n))
    picks = np.sort(np.argpartition(keys, b - 1, axis=1)[:, :b], axis=1)
    return [MiniBatchSpec(tuple(row)) for row in picks]


def make_split_plan(n: int, lam: int, kappa: int, steps: int, seed: int) -> SplitPlan:
    """Static groups of ``lam`` samples, re-assigned to ``kappa`` equal splits every step."""
    if lam < 1 or kappa < 1 or steps < 1:
        raise ValueError("lam, kappa and steps must be >= 1")
    if n % (lam * kappa):
        raise ValueError(f"lam*kappa={lam * kappa} must divide n={n}")
    rng = np.random.default_rng(seed)
    n_groups = n // lam
    order = np.arange(n) if lam == 1 else rng.permutation(n)
    groups = order.reshape(n_groups, lam)
    groups = np.sort(groups, axis=1)
    group_of = np.empty(n, dtype=np.int64)
    group_of[groups.ravel()] = np.repeat(np.arange(n_groups), lam)
    per_split = n_groups // kappa
    slot_split = np.repeat(np.arange(kappa), per_split).astype(np.int32)
    assignment = np.empty((steps, n_groups), dtype=np.int32)
    for t in range(steps):
        assignment[t, rng.permutation(n_groups)] = slot_split
    return SplitPlan(n, lam, kappa, seed, groups, assignment, group_of)


# ------------------------------------------------------- binary container


def save_dataset(ds: Dataset, path) -> None:
    """Little-endian container: header, f64 rows, u16 labels."""
    h, w, ch = ds.image_shape or (0, 0, 0)
    header = _CONTAINER_MAGIC + struct.pack("<IQQIqIII", _CONTAINER_VERSION, ds.n, ds.dim, ds.classes,
                                            ds.seed, h, w, ch)
    body = ds.features.astype("<f8").tobytes() + ds.labels.astype("<u2").tobytes()
    Path(path).write_bytes(header + body)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    fmt = "<IQQIqIII"
    hlen = 4 + struct.calcsize(fmt)
    if len(raw) < hlen or raw[:4] != _CONTAINER_MAGIC:
        raise DataFormatError("not a dataset container")
    version, n, d, c, seed, h, w, ch = struct.unpack(fmt, raw[4:hlen])
    if version != _CONTAINER_VERSION:
        raise DataFormatError(f"unsupported container version {version}")
    need = hlen + 8 * n * d + 2 * n
    if len(raw) != need:
        raise DataFormatError("container size mismatch")
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=hlen).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=hlen + 8 * n * d)
    shape = (h, w, ch) if h else None
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), c, shape, seed)
