"""Gallery index construction and the fast-filtering search stage.

The index holds quantization codes for every enrolled vector (plus the raw
normalized vectors when re-ranking needs exact scores). Searches return
candidate lists sorted by similarity, ties broken by ascending id.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .quantizer import PQCodebook, build_distance_table, encode_many
from .store import Dataset, l2_normalize, normalize_rows

_IX_MAGIC = b"PQIX"
_IX_HEADER = struct.Struct("<4sIIIQB")  # magic, m, z, dim, N, keep_raw

DEFAULT_CANDIDATE_CAP = 50_000


class Metric(enum.Enum):
    COSINE = "cosine"
    L1 = "l1"
    L2 = "l2"


@dataclass(eq=False)
class GalleryIndex:
    """Immutable searchable gallery: codes, ids, codebook, optional raw vectors."""

    codebook: PQCodebook
    ids: np.ndarray                  # (N,) uint64
    codes: np.ndarray                # (N, m) uint8 or uint16
    raw_vectors: np.ndarray | None   # (N, dim) float32, unit rows
    norm_applied: bool = True

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.codes = np.ascontiguousarray(self.codes)
        n = len(self.ids)
        if self.codes.shape != (n, self.codebook.m):
            raise ValueError(
                f"codes shape {self.codes.shape} does not match "
                f"{n} ids and m={self.codebook.m}"
            )
        if self.raw_vectors is not None:
            self.raw_vectors = np.ascontiguousarray(self.raw_vectors,
                                                    dtype=np.float32)
            if self.raw_vectors.shape != (n, self.codebook.dim):
                raise ValueError("raw vector shape does not match index")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class CandidateList:
    """Ranked retrieval output: ids with similarity scores, descending."""

    ids: np.ndarray      # (k,) uint64
    scores: np.ndarray   # (k,) float64

    @property
    def entries(self) -> list:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.entries)


def build_index(dataset: Dataset, codebook: PQCodebook,
                keep_raw: bool = True) -> GalleryIndex:
    """Normalize, encode, and freeze a dataset into a searchable index."""
    if dataset.dim != codebook.dim:
        raise ValueError(
            f"dimension mismatch: dataset dim {dataset.dim} vs codebook "
            f"dim {codebook.dim}"
        )
    dataset.validate()
    normed = normalize_rows(dataset.vectors)
    codes = encode_many(codebook, normed)
    return GalleryIndex(
        codebook=codebook,
        ids=dataset.ids.copy(),
        codes=codes,
        raw_vectors=normed if keep_raw else None,
        norm_applied=True,
    )


def select_top_k(scores: np.ndarray, ids: np.ndarray, k: int):
    """Pick the k best (score desc, id asc) without sorting the whole array."""
    n = scores.shape[0]
    if k >= n:
        order = np.lexsort((ids, -scores))
        return ids[order], scores[order]
    part = np.argpartition(scores, n - k)[n - k:]
    boundary = scores[part].min()
    strict = np.nonzero(scores > boundary)[0]
    need = k - strict.size
    at_boundary = np.nonzero(scores == boundary)[0]
    fill = at_boundary[np.argsort(ids[at_boundary])[:need]]
    sel = np.concatenate([strict, fill])
    order = np.lexsort((ids[sel], -scores[sel]))
    sel = sel[order]
    return ids[sel], scores[sel]


def _raw_matrix(source):
    """Raw vectors, ids, and a normalized-rows flag from an index or dataset."""
    if isinstance(source, GalleryIndex):
        if source.raw_vectors is None:
            raise ValueError("raw vectors missing: index was built with keep_raw=False")
        return source.raw_vectors, source.ids, source.norm_applied
    if isinstance(source, Dataset):
        return source.vectors, source.ids, False
    raise TypeError(f"expected GalleryIndex or Dataset, got {type(source)!r}")


def exact_cosine_scores(vectors: np.ndarray, query: np.ndarray,
                        rows_normalized: bool) -> np.ndarray:
    """Cosine of the query against every row (single-precision scan)."""
    qn = l2_normalize(query)
    scores = vectors @ qn
    if not rows_normalized:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise ValueError(f"zero norm at row {int(zero[0])}")
        return scores.astype(np.float64) / norms
    return scores.astype(np.float64)


def _cosine_scores_f64(vectors, query, rows_normalized, chunk=262144):
    """Reference-quality cosine: double precision, chunked."""
    q64 = np.asarray(query, dtype=np.float64)
    qn = q64 / np.linalg.norm(q64)
    out = np.empty(vectors.shape[0], dtype=np.float64)
    for start in range(0, vectors.shape[0], chunk):
        stop = min(start + chunk, vectors.shape[0])
        block = vectors[start:stop].astype(np.float64)
        out[start:stop] = block @ qn
        if not rows_normalized:
            norms = np.linalg.norm(block, axis=1)
            zero = np.nonzero(norms == 0.0)[0]
            if zero.size:
                raise ValueError(f"zero norm at row {start + int(zero[0])}")
            out[start:stop] /= norms
    return out


def _l2_scores(vectors, query, chunk=262144):
    q = np.asarray(query, dtype=np.float64)
    out = np.empty(vectors.shape[0], dtype=np.float64)
    for start in range(0, vectors.shape[0], chunk):
        stop = min(start + chunk, vectors.shape[0])
        diff = vectors[start:stop].astype(np.float64) - q
        out[start:stop] = -np.sqrt(np.sum(diff * diff, axis=1))
    return out


def _l1_scores(vectors, query, chunk=262144):
    q = np.asarray(query, dtype=np.float64)
    out = np.empty(vectors.shape[0], dtype=np.float64)
    for start in range(0, vectors.shape[0], chunk):
        stop = min(start + chunk, vectors.shape[0])
        out[start:stop] = -np.sum(np.abs(vectors[start:stop].astype(np.float64) - q),
                                  axis=1)
    return out


def search_exact(source, query, k: int, metric=Metric.COSINE) -> CandidateList:
    """Exhaustive top-k over raw vectors under cosine, L1, or L2.

    Cosine scores are similarities; L1/L2 scores are negated distances, so
    higher is always better.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    metric = Metric(metric)
    vectors, ids, rows_normalized = _raw_matrix(source)
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (vectors.shape[1],):
        raise ValueError(
            f"dimension mismatch: query {q.shape} vs gallery dim {vectors.shape[1]}"
        )
    if metric is Metric.COSINE:
        if np.linalg.norm(np.asarray(query, dtype=np.float64)) == 0.0:
            raise ValueError("zero norm query")
        scores = _cosine_scores_f64(vectors, q, rows_normalized)
    elif metric is Metric.L2:
        scores = _l2_scores(vectors, q)
    else:
        scores = _l1_scores(vectors, q)
    top_ids, top_scores = select_top_k(scores, ids, k)
    return CandidateList(ids=top_ids, scores=top_scores)


def adc_scan(index: GalleryIndex, query) -> np.ndarray:
    """ADC similarity of the query to every code: 1 - D/2 per gallery row."""
    dt = build_distance_table(index.codebook, query)
    # Exact upcast: float64 sums are bit-identical to summing the float32
    # entries, and the inner loop skips the per-element conversion.
    table = dt.table.astype(np.float64)
    sims = np.empty(len(index), dtype=np.float64)
    codes = index.codes
    if codes.dtype == np.uint8 and codes.shape[1] % 8 == 0 and \
            codes.flags.c_contiguous:
        _kernels.scan_sims_packed(table, codes.view(np.uint64), sims)
    else:
        _kernels.scan_sims(table, codes, sims)
    return sims


def search_pq(index: GalleryIndex, query, k: int) -> CandidateList:
    """Fast filter: one distance table, one scan of all N codes, top-k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = adc_scan(index, query)
    top_ids, top_scores = select_top_k(sims, index.ids, k)
    return CandidateList(ids=top_ids, scores=top_scores)


def default_candidate_size(n: int, cap: int = DEFAULT_CANDIDATE_CAP) -> int:
    """Candidate-list size heuristic: 1% of the gallery, clamped to [50, cap]."""
    if n < 1:
        raise ValueError("gallery size must be >= 1")
    return min(max(-(-n // 100), 50), cap)


def save_index(index: GalleryIndex, path) -> None:
    """Write header, codebook centroids, ids, codes, and optional raw vectors."""
    cb = index.codebook
    keep_raw = index.raw_vectors is not None
    with open(path, "wb") as f:
        f.write(_IX_HEADER.pack(_IX_MAGIC, cb.m, cb.z, cb.dim, len(index),
                                1 if keep_raw else 0))
        f.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(index.ids, dtype="<u8").tobytes())
        code_dt = "<u1" if cb.z <= 256 else "<u2"
        f.write(np.ascontiguousarray(index.codes, dtype=code_dt).tobytes())
        if keep_raw:
            f.write(np.ascontiguousarray(index.raw_vectors, dtype="<f4").tobytes())


def load_index(path) -> GalleryIndex:
    with open(path, "rb") as f:
        head = f.read(_IX_HEADER.size)
        if len(head) < _IX_HEADER.size:
            raise ValueError("truncated header")
        magic, m, z, dim, n, keep_raw = _IX_HEADER.unpack(head)
        if magic != _IX_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_IX_MAGIC!r}")
        if m == 0 or dim % m != 0:
            raise ValueError(f"invalid header: m={m}, dim={dim}")
        payload = f.read()
    code_bytes = 1 if z <= 256 else 2
    sizes = [m * z * (dim // m) * 4, n * 8, n * m * code_bytes,
             n * dim * 4 if keep_raw else 0]
    if len(payload) != sum(sizes):
        raise ValueError(
            f"truncated payload: expected {sum(sizes)} bytes, found {len(payload)}"
        )
    off = 0
    cents = np.frombuffer(payload, dtype="<f4", count=m * z * (dim // m),
                          offset=off).reshape(m, z, dim // m).copy()
    off += sizes[0]
    ids = np.frombuffer(payload, dtype="<u8", count=n, offset=off).copy()
    off += sizes[1]
    code_dt = "<u1" if code_bytes == 1 else "<u2"
    codes = np.frombuffer(payload, dtype=code_dt, count=n * m,
                          offset=off).reshape(n, m).copy()
    off += sizes[2]
    raw = None
    if keep_raw:
        raw = np.frombuffer(payload, dtype="<f4", count=n * dim,
                            offset=off).reshape(n, dim).copy()
    return GalleryIndex(
        codebook=PQCodebook(m=m, z=z, dim=dim, centroids=cents),
        ids=ids,
        codes=codes,
        raw_vectors=raw,
        norm_applied=True,
    )
