"""Embedding storage: dataset files, synthetic data, normalization, PCA.

Datasets are held column-wise (one id array, one vector matrix) so that
million-row galleries stay cheap to build and scan; row objects are
materialized on demand.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_MAGIC = b"FVE1"
_HEADER = struct.Struct("<4sIQ")  # magic, dim (u32), count (u64)


@dataclass
class EmbeddingRecord:
    """One gallery or probe item: identity, labels, and a d-dim vector."""

    id: int
    subject: str | None
    well_aligned: bool
    vector: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Ordered collection of embedding records with a fixed dimension d."""

    dim: int
    ids: np.ndarray                 # (n,) uint64
    subjects: list                  # str or None, one per row
    well_aligned: np.ndarray        # (n,) bool
    vectors: np.ndarray             # (n, dim) float32

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.well_aligned = np.ascontiguousarray(self.well_aligned, dtype=bool)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        n = len(self.ids)
        if self.vectors.shape != (n, self.dim):
            raise ValueError(
                f"vector matrix shape {self.vectors.shape} does not match "
                f"{n} records of dimension {self.dim}"
            )
        if len(self.subjects) != n or len(self.well_aligned) != n:
            raise ValueError("column lengths disagree")

    @classmethod
    def from_records(cls, records, dim=None):
        records = list(records)
        if dim is None:
            if not records:
                raise ValueError("dimension required for an empty dataset")
            dim = len(records[0].vector)
        if not records:
            return cls(dim, np.empty(0, np.uint64), [],
                       np.empty(0, bool), np.empty((0, dim), np.float32))
        vecs = np.stack([np.asarray(r.vector, dtype=np.float32) for r in records])
        return cls(
            dim,
            np.array([r.id for r in records], dtype=np.uint64),
            [r.subject for r in records],
            np.array([r.well_aligned for r in records], dtype=bool),
            vecs,
        )

    @cached_property
    def records(self) -> list:
        return [self.record(i) for i in range(len(self))]

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(
            id=int(self.ids[i]),
            subject=self.subjects[i],
            well_aligned=bool(self.well_aligned[i]),
            vector=self.vectors[i],
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self)):
            yield self.record(i)

    def validate(self):
        """Check invariants that are too costly for construction time."""
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in dataset")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite vector components")


def l2_normalize(vector) -> np.ndarray:
    """Scale a vector to unit L2 norm. Raises on a zero vector."""
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("zero norm")
    return (v / norm).astype(np.float32)


def normalize_rows(mat: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Row-wise unit normalization of a float matrix (64-bit arithmetic).

    Processed in chunks so large galleries never materialize a full
    double-precision copy.
    """
    mat = np.asarray(mat)
    out = np.empty(mat.shape, dtype=np.float32)
    for start in range(0, mat.shape[0], chunk):
        stop = min(start + chunk, mat.shape[0])
        block = mat[start:stop].astype(np.float64)
        norms = np.linalg.norm(block, axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise ValueError(f"zero norm at row {start + int(zero[0])}")
        out[start:stop] = block / norms[:, None]
    return out


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as a vector file plus a JSON sidecar manifest.

    Layout: 4-byte magic, u32 dim, u64 count, then count*dim little-endian
    float32 values row-major. The manifest (path + ".manifest.json") carries
    per-row id, subject, and alignment flag.
    """
    dataset.validate()
    vecs = np.ascontiguousarray(dataset.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, dataset.dim, len(dataset)))
        f.write(vecs.tobytes())
    manifest = [
        {"id": int(i), "subject": s, "well_aligned": bool(w)}
        for i, s, w in zip(dataset.ids, dataset.subjects, dataset.well_aligned)
    ]
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f)


def manifest_path(path) -> str:
    return str(path) + ".manifest.json"


def load_dataset(path) -> Dataset:
    """Read a dataset written by save_dataset, preserving record order."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError("truncated header")
        magic, dim, count = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        payload = f.read()
    expected = count * dim * 4
    if len(payload) < expected:
        raise ValueError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise ValueError(
            f"dimension mismatch: header declares {count}x{dim} floats "
            f"but payload holds {len(payload)} bytes"
        )
    vecs = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"missing manifest: {mpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if len(manifest) != count:
        raise ValueError(
            f"manifest lists {len(manifest)} records, file holds {count}"
        )
    ds = Dataset(
        dim=int(dim),
        ids=np.array([row["id"] for row in manifest], dtype=np.uint64),
        subjects=[row["subject"] for row in manifest],
        well_aligned=np.array([row["well_aligned"] for row in manifest], dtype=bool),
        vectors=vecs,
    )
    ds.validate()
    return ds


def generate_synthetic(num_subjects: int, images_per_subject: int, dim: int,
                       within_class_noise: float, poorly_aligned_fraction: float,
                       seed: int, subject_prefix: str = "s",
                       id_offset: int = 0) -> Dataset:
    """Build a labeled dataset of noisy unit vectors around class centers.

    Each subject gets a random unit-norm center; each record is the center
    plus isotropic Gaussian noise, re-normalized. Records drawn as poorly
    aligned get well_aligned=False and doubled noise. Deterministic for a
    fixed seed.
    """
    if num_subjects < 1:
        raise ValueError("num_subjects must be >= 1")
    if images_per_subject < 1:
        raise ValueError("images_per_subject must be >= 1")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if within_class_noise < 0:
        raise ValueError("within_class_noise must be nonnegative")
    if not 0.0 <= poorly_aligned_fraction <= 1.0:
        raise ValueError("poorly_aligned_fraction must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n = num_subjects * images_per_subject
    centers = rng.standard_normal((num_subjects, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    poor = rng.random(n) < poorly_aligned_fraction
    subj_of_row = np.repeat(np.arange(num_subjects), images_per_subject)

    vectors = np.empty((n, dim), dtype=np.float32)
    # Chunked so the float64 scratch stays small at million-row scale.
    chunk = 65536
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        noise = rng.standard_normal((stop - start, dim))
        scale = np.where(poor[start:stop], 2.0 * within_class_noise,
                         within_class_noise)
        pts = centers[subj_of_row[start:stop]] + scale[:, None] * noise
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        vectors[start:stop] = (pts / norms).astype(np.float32)

    subjects = [f"{subject_prefix}{int(s):05d}" for s in subj_of_row]
    return Dataset(
        dim=dim,
        ids=np.arange(id_offset, id_offset + n, dtype=np.uint64),
        subjects=subjects,
        well_aligned=~poor,
        vectors=vectors,
    )


@dataclass
class PCAModel:
    """Linear projection onto the leading principal directions."""

    mean: np.ndarray      # (d,) float32
    basis: np.ndarray     # (target_dim, d) float32, orthonormal rows
    target_dim: int


def pca_fit(source, target_dim: int) -> PCAModel:
    """Fit PCA by eigendecomposition of the sample covariance.

    Accepts a Dataset or a plain (n, d) matrix. Basis rows are the top
    target_dim principal directions by explained variance, each sign-fixed
    so its first nonzero component is positive.
    """
    vectors = source.vectors if isinstance(source, Dataset) else np.asarray(source)
    n, d = vectors.shape
    if target_dim > d:
        raise ValueError(f"target_dim {target_dim} exceeds dimension {d}")
    if n < target_dim:
        raise ValueError(f"too few records ({n}) for target_dim {target_dim}")
    x = vectors.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:target_dim]
    basis = eigvecs[:, order].T
    for row in basis:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return PCAModel(mean=mean.astype(np.float32),
                    basis=basis.astype(np.float32),
                    target_dim=target_dim)


def pca_transform(model: PCAModel, vector) -> np.ndarray:
    """Project one vector: basis @ (vector - mean)."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (model.basis.shape[1],):
        raise ValueError(
            f"dimension mismatch: vector has {v.shape}, model expects "
            f"({model.basis.shape[1]},)"
        )
    out = model.basis.astype(np.float64) @ (v - model.mean.astype(np.float64))
    return out.astype(np.float32)


def pca_transform_many(model: PCAModel, vectors: np.ndarray) -> np.ndarray:
    """Project a matrix of row vectors through the model."""
    x = np.asarray(vectors, dtype=np.float64)
    out = (x - model.mean.astype(np.float64)) @ model.basis.astype(np.float64).T
    return out.astype(np.float32)
