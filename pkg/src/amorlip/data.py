"""Synthetic paired-modality data, the APDS1 on-disk format, and
deterministic batch iteration.

APDS1 layout (little-endian): magic b"APDS1\\n", u32 fields n, dim_a,
dim_b, num_classes, then n * dim_a float32 (modality a, row-major),
n * dim_b float32 (modality b), n u32 labels. Total size is exactly
6 + 16 + 4 n (dim_a + dim_b) + 4 n bytes.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .numerics import Array, seeded_rng

MAGIC = b"APDS1\n"
_HEADER = struct.Struct("<4I")

SPLIT_SEED_SALT = 7701
BATCH_SEED_SALT = 3001


@dataclass
class PairedDataset:
    """Paired feature rows for two modalities; pair i shares one latent sample."""

    mod_a: Array  # (n, dim_a) float32
    mod_b: Array  # (n, dim_b) float32
    labels: Array  # (n,) uint32 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.mod_a = np.ascontiguousarray(self.mod_a, dtype=np.float32)
        self.mod_b = np.ascontiguousarray(self.mod_b, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.mod_a.ndim != 2 or self.mod_b.ndim != 2 or self.labels.ndim != 1:
            raise ContractError("dataset arrays have wrong ranks")
        n = self.mod_a.shape[0]
        if self.mod_b.shape[0] != n or self.labels.shape[0] != n or n < 1:
            raise ContractError("dataset arrays disagree on the sample count")
        if self.num_classes < 1 or np.any(self.labels >= self.num_classes):
            raise ContractError("labels must lie in [0, num_classes)")

    @property
    def n(self) -> int:
        return self.mod_a.shape[0]

    @property
    def dim_a(self) -> int:
        return self.mod_a.shape[1]

    @property
    def dim_b(self) -> int:
        return self.mod_b.shape[1]

    def subset(self, indices) -> "PairedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return PairedDataset(
            mod_a=self.mod_a[idx].copy(),
            mod_b=self.mod_b[idx].copy(),
            labels=self.labels[idx].copy(),
            num_classes=self.num_classes,
        )


def generate_synthetic(
    n: int, num_classes: int, dim_a: int, dim_b: int, noise_sigma: float, seed: int
) -> PairedDataset:
    """Class-structured paired vectors.

    One unit-norm latent prototype per class (dim = min(dim_a, dim_b));
    each sample picks a class uniformly and emits the prototype pushed
    through a fixed random linear map per modality plus isotropic noise.
    Map entries are i.i.d. N(0, 1/latent_dim) so modality norms stay O(1).
    """
    if num_classes < 2 or n < num_classes:
        raise ConfigError(f"need n >= num_classes >= 2, got n={n}, classes={num_classes}")
    if dim_a < 2 or dim_b < 2:
        raise ConfigError(f"modality dims must be >= 2, got {dim_a}, {dim_b}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = seeded_rng(seed)
    latent = min(dim_a, dim_b)
    protos = rng.standard_normal((num_classes, latent))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    map_a = rng.standard_normal((latent, dim_a)) / math.sqrt(latent)
    map_b = rng.standard_normal((latent, dim_b)) / math.sqrt(latent)
    labels = rng.integers(0, num_classes, size=n)
    mod_a = protos[labels] @ map_a + noise_sigma * rng.standard_normal((n, dim_a))
    mod_b = protos[labels] @ map_b + noise_sigma * rng.standard_normal((n, dim_b))
    return PairedDataset(
        mod_a=mod_a.astype(np.float32),
        mod_b=mod_b.astype(np.float32),
        labels=labels.astype(np.uint32),
        num_classes=num_classes,
    )


def dataset_file_size(n: int, dim_a: int, dim_b: int) -> int:
    return len(MAGIC) + _HEADER.size + 4 * n * (dim_a + dim_b) + 4 * n


def save_dataset(ds: PairedDataset, path) -> None:
    """Write APDS1 atomically (full buffer, temp file, rename)."""
    payload = b"".join(
        [
            MAGIC,
            _HEADER.pack(ds.n, ds.dim_a, ds.dim_b, ds.num_classes),
            np.ascontiguousarray(ds.mod_a, dtype="<f4").tobytes(),
            np.ascontiguousarray(ds.mod_b, dtype="<f4").tobytes(),
            np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
        ]
    )
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_dataset(path) -> PairedDataset:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not an APDS1 file", offset=0)
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    n, dim_a, dim_b, num_classes = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if n == 0:
        raise FormatError("empty dataset rejected (n = 0)", offset=len(MAGIC))
    if dim_a == 0 or dim_b == 0 or num_classes == 0:
        raise FormatError(
            f"invalid header fields n={n} dim_a={dim_a} dim_b={dim_b} classes={num_classes}",
            offset=len(MAGIC),
        )
    expected = dataset_file_size(n, dim_a, dim_b)
    if len(blob) < expected:
        raise FormatError(
            f"truncated payload, expected {expected} bytes, found {len(blob)}", offset=len(blob)
        )
    if len(blob) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    mod_a = np.frombuffer(blob, dtype="<f4", count=n * dim_a, offset=off).reshape(n, dim_a)
    off += 4 * n * dim_a
    mod_b = np.frombuffer(blob, dtype="<f4", count=n * dim_b, offset=off).reshape(n, dim_b)
    off += 4 * n * dim_b
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise FormatError(
            f"label {int(labels[bad[0]])} out of range [0, {num_classes})",
            offset=off + 4 * int(bad[0]),
        )
    return PairedDataset(
        mod_a=mod_a.copy(), mod_b=mod_b.copy(), labels=labels.copy(), num_classes=num_classes
    )


@dataclass(frozen=True)
class BatchPlan:
    """A full-epoch permutation sliced into fixed-size batches (remainder dropped)."""

    epoch: int
    batch_size: int
    permutation: Array
    drop_last: bool = True

    @property
    def n_batches(self) -> int:
        return self.permutation.shape[0] // self.batch_size

    def batches(self) -> Iterator[Array]:
        for k in range(self.n_batches):
            yield self.permutation[k * self.batch_size : (k + 1) * self.batch_size]


def make_batch_plan(n: int, batch_size: int, seed: int, epoch: int) -> BatchPlan:
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    perm = seeded_rng(seed, BATCH_SEED_SALT, epoch).permutation(n)
    return BatchPlan(epoch=epoch, batch_size=batch_size, permutation=perm)


def batch_iterator(ds: PairedDataset, batch_size: int, seed: int, epoch: int) -> Iterator[Array]:
    """Disjoint index batches from a seeded shuffle keyed by (seed, epoch)."""
    return make_batch_plan(ds.n, batch_size, seed, epoch).batches()


def split_eval(ds: PairedDataset, eval_fraction: float, seed: int):
    """Hold out a seeded permutation slice for evaluation; returns (train, eval)."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    n_eval = int(round(ds.n * eval_fraction))
    n_eval = min(max(n_eval, 1), ds.n - 1)
    perm = seeded_rng(seed, SPLIT_SEED_SALT).permutation(ds.n)
    return ds.subset(perm[n_eval:]), ds.subset(perm[:n_eval])
