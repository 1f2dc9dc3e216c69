"""Product-quantization codebooks: k-means training, encoding, ADC tables.

A d-dim vector is split into m sub-vectors; each sub-vector is quantized
against its own z-entry codebook, so a vector compresses to m small integers.
Distances against a query are then sums of per-sub-space table lookups.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_M = 64
DEFAULT_Z = 256
DEFAULT_MAX_ITERS = 25
KMEANS_REL_TOL = 1e-5

_CB_MAGIC = b"PQCB"
_CB_HEADER = struct.Struct("<4sIII")  # magic, m, z, dim


@dataclass
class PQCodebook:
    """m sub-codebooks of z centroids each; centroids has shape (m, z, d/m)."""

    m: int
    z: int
    dim: int
    centroids: np.ndarray  # (m, z, dim // m) float32

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.dim % self.m != 0:
            raise ValueError(f"dim {self.dim} not divisible by m {self.m}")
        if self.centroids.shape != (self.m, self.z, self.dim // self.m):
            raise ValueError(
                f"centroid array shape {self.centroids.shape} does not match "
                f"(m={self.m}, z={self.z}, d/m={self.dim // self.m})"
            )
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid components")

    @property
    def sub_dim(self) -> int:
        return self.dim // self.m

    def code_dtype(self):
        return np.uint8 if self.z <= 256 else np.uint16


@dataclass
class PQCode:
    """Quantization code for one vector: m sub-centroid indices."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices)


@dataclass
class DistanceTable:
    """Per-query lookup table of squared sub-distances, shape (m, z)."""

    table: np.ndarray  # (m, z) float32
    query_dim: int


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator):
    """Seed k centers by distance-weighted sampling over the points."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining mass collapsed onto existing centers; fall back
            # to uniform draws so we still return k rows.
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centers[i] = points[choice]
        np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1), out=d2)
    return centers


def _assign(points: np.ndarray, centers: np.ndarray, chunk: int = 65536):
    """Nearest-center assignment; returns (labels, squared distance to own center)."""
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    c_sq = np.sum(centers ** 2, axis=1)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = points[start:stop]
        d2 = c_sq[None, :] - 2.0 * (block @ centers.T)
        lab = np.argmin(d2, axis=1)
        labels[start:stop] = lab
        rows = np.arange(stop - start)
        dists[start:stop] = d2[rows, lab] + np.sum(block ** 2, axis=1)
    np.maximum(dists, 0.0, out=dists)
    return labels, dists


def kmeans(points: np.ndarray, k: int, max_iters: int,
           rng: np.random.Generator, tol: float = KMEANS_REL_TOL):
    """Lloyd's algorithm with distance-weighted seeding.

    Returns (centers, sse_history). SSE is recorded at each assignment step,
    so the history is non-increasing. Empty clusters are re-seeded to the
    point currently farthest from its own center. Stops when the relative
    SSE improvement falls below tol, or after max_iters iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"fewer points ({n}) than centers ({k})")
    centers = _plusplus_init(points, k, rng)
    history = []
    prev = None
    for _ in range(max_iters):
        labels, dists = _assign(points, centers)
        sse = float(dists.sum())
        history.append(sse)
        if prev is not None and prev - sse <= tol * max(prev, 1e-300):
            break
        prev = sse
        counts = np.bincount(labels, minlength=k)
        sums = np.empty_like(centers)
        for j in range(points.shape[1]):
            sums[:, j] = np.bincount(labels, weights=points[:, j], minlength=k)
        nonzero = counts > 0
        centers[nonzero] = sums[nonzero] / counts[nonzero, None]
        empties = np.nonzero(~nonzero)[0]
        if empties.size:
            far_order = np.argsort(dists)[::-1]
            for slot, e in enumerate(empties):
                centers[e] = points[far_order[slot]]
    return centers, history


def train_codebooks(vectors, m: int, z: int,
                    max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0,
                    threads: int = 1) -> PQCodebook:
    """Train one k-means codebook per sub-space over the given vectors.

    Accepts a Dataset or a float matrix. Sub-spaces are independent, so they
    may be trained in parallel; per-sub-space RNG streams are spawned from
    the root seed, which keeps results identical for any thread count.
    """
    mat = getattr(vectors, "vectors", vectors)
    mat = np.asarray(mat, dtype=np.float32)
    if mat.ndim != 2:
        raise ValueError("training vectors must form a 2-D matrix")
    n, d = mat.shape
    if d % m != 0:
        raise ValueError(f"dimension {d} not divisible by m {m}")
    if n < z:
        raise ValueError(f"fewer training vectors ({n}) than z ({z})")
    sub = d // m
    seeds = np.random.SeedSequence(seed).spawn(m)

    def train_one(i):
        rng = np.random.default_rng(seeds[i])
        pts = mat[:, i * sub:(i + 1) * sub]
        centers, _ = kmeans(pts, z, max_iters, rng)
        return centers.astype(np.float32)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_centers = list(pool.map(train_one, range(m)))
    else:
        all_centers = [train_one(i) for i in range(m)]
    return PQCodebook(m=m, z=z, dim=d, centroids=np.stack(all_centers))


def encode_many(codebook: PQCodebook, vectors: np.ndarray,
                chunk: int = 65536) -> np.ndarray:
    """Encode a matrix of row vectors to an (n, m) array of centroid indices."""
    mat = np.asarray(vectors, dtype=np.float32)
    if mat.ndim != 2 or mat.shape[1] != codebook.dim:
        raise ValueError(
            f"dimension mismatch: vectors {mat.shape} vs codebook dim {codebook.dim}"
        )
    n = mat.shape[0]
    m, z, sub = codebook.m, codebook.z, codebook.sub_dim
    codes = np.empty((n, m), dtype=codebook.code_dtype())
    cents = codebook.centroids
    c_sq = np.sum(cents.astype(np.float64) ** 2, axis=2).astype(np.float32)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = mat[start:stop]
        for i in range(m):
            piece = block[:, i * sub:(i + 1) * sub]
            d2 = c_sq[i][None, :] - 2.0 * (piece @ cents[i].T)
            codes[start:stop, i] = np.argmin(d2, axis=1)
    return codes


def encode(codebook: PQCodebook, vector) -> PQCode:
    """Quantize one vector; ties go to the smallest centroid index."""
    v = np.asarray(vector, dtype=np.float32)
    if v.shape != (codebook.dim,):
        raise ValueError(
            f"dimension mismatch: vector {v.shape} vs codebook dim {codebook.dim}"
        )
    return PQCode(indices=encode_many(codebook, v[None, :])[0])


def decode(codebook: PQCodebook, code) -> np.ndarray:
    """Reconstruct the vector a code stands for (concatenated sub-centroids)."""
    idx = np.asarray(code.indices if isinstance(code, PQCode) else code)
    if idx.shape != (codebook.m,):
        raise ValueError(f"code length {idx.shape} does not match m {codebook.m}")
    if np.any(idx >= codebook.z):
        raise ValueError(f"code index out of range (z={codebook.z})")
    return codebook.centroids[np.arange(codebook.m), idx.astype(np.int64)].reshape(-1)


def build_distance_table(codebook: PQCodebook, query_vector) -> DistanceTable:
    """Precompute squared distances from each query sub-vector to every centroid."""
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (codebook.dim,):
        raise ValueError(
            f"dimension mismatch: query {q.shape} vs codebook dim {codebook.dim}"
        )
    subq = q.reshape(codebook.m, 1, codebook.sub_dim)
    diffs = subq - codebook.centroids.astype(np.float64)
    table = np.sum(diffs ** 2, axis=2)
    return DistanceTable(table=table.astype(np.float32), query_dim=codebook.dim)


def adc_distance(table: DistanceTable, code) -> float:
    """Asymmetric distance: sum of m table lookups for the code's indices."""
    idx = np.asarray(code.indices if isinstance(code, PQCode) else code)
    m = table.table.shape[0]
    if idx.shape != (m,):
        raise ValueError(f"code length {idx.shape} does not match table m {m}")
    return float(np.sum(table.table[np.arange(m), idx.astype(np.int64)],
                        dtype=np.float64))


def save_codebook(codebook: PQCodebook, path) -> None:
    """Write a codebook: magic, u32 m/z/dim, then centroids as little-endian f32."""
    with open(path, "wb") as f:
        f.write(_CB_HEADER.pack(_CB_MAGIC, codebook.m, codebook.z, codebook.dim))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def load_codebook(path) -> PQCodebook:
    with open(path, "rb") as f:
        head = f.read(_CB_HEADER.size)
        if len(head) < _CB_HEADER.size:
            raise ValueError("truncated header")
        magic, m, z, dim = _CB_HEADER.unpack(head)
        if magic != _CB_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_CB_MAGIC!r}")
        payload = f.read()
    if m == 0 or dim % m != 0:
        raise ValueError(f"invalid header: m={m}, dim={dim}")
    expected = m * z * (dim // m) * 4
    if len(payload) != expected:
        raise ValueError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    cents = np.frombuffer(payload, dtype="<f4").reshape(m, z, dim // m).copy()
    return PQCodebook(m=m, z=z, dim=dim, centroids=cents)
