"""Candidate re-ranking: slow-matcher plug-in interface and score fusion.

The cascade takes the fast filter's candidate list and re-orders it using a
second, slower matcher. Scores from the two matchers are combined per probe
by z-score normalization and sum fusion (or by rank-sum fusion).
"""

from __future__ import annotations

import abc
import enum
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .gallery import CandidateList, GalleryIndex, adc_scan, search_pq, select_top_k
from .store import l2_normalize, normalize_rows

_SM_MAGIC = b"SMAT"
_SM_RECORD = struct.Struct("<QQf")


class FusionStrategy(enum.Enum):
    DF_PLUS_COTS = "df-plus-cots"
    DF_THEN_COTS = "df-then-cots"
    DF_THEN_COTS_ONLY = "df-then-cots-only"
    DF_THEN_COTS_RANK = "df-then-cots-rank"


def zscore_normalize(scores) -> np.ndarray:
    """Rescale scores to mean 0, population standard deviation 1."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("degenerate score set: need at least 2 scores")
    std = float(s.std())
    if std == 0.0:
        raise ValueError("degenerate score set: zero variance")
    return (s - s.mean()) / std


def sum_fuse(a, b) -> np.ndarray:
    """Elementwise sum of two pre-normalized score lists."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a + b


def rank_fuse(rank_a, rank_b) -> list:
    """Merge two orderings by ascending sum of 1-based ranks (ties by id)."""
    a = list(rank_a)
    b = list(rank_b)
    if len(set(a)) != len(a) or len(set(b)) != len(b) or set(a) != set(b):
        raise ValueError("id-set mismatch between the two rankings")
    pos_b = {gid: r for r, gid in enumerate(b, start=1)}
    sums = {gid: r + pos_b[gid] for r, gid in enumerate(a, start=1)}
    return sorted(a, key=lambda gid: (sums[gid], gid))


class SlowMatcher(abc.ABC):
    """Second-stage matcher: scores a probe vector against gallery ids.

    Implementations must be deterministic for fixed inputs and declare via
    supports_concurrent_calls whether score() tolerates concurrent callers.
    """

    supports_concurrent_calls = False

    @abc.abstractmethod
    def score(self, probe_vector, gallery_id: int) -> float:
        """Similarity of the probe to one gallery item; higher is more similar."""

    def score_many(self, probe_vector, gallery_ids) -> np.ndarray:
        return np.array([self.score(probe_vector, int(g)) for g in gallery_ids],
                        dtype=np.float64)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; uint64 in, well-scrambled uint64 out.

    Arithmetic is modulo 2**64 by construction, so overflow is expected.
    """
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _hash_normal(probe_key: np.uint64, gallery_ids: np.ndarray) -> np.ndarray:
    """Standard normal draw per (probe, gallery id), order-independent."""
    h1 = _mix64(gallery_ids.astype(np.uint64) ^ probe_key)
    h2 = _mix64(h1)
    u1 = (h1 >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


class ReferenceSlowMatcher(SlowMatcher):
    """Exact cosine over stored raw vectors plus seeded score perturbation.

    The perturbation is a deterministic function of (probe bytes, gallery id,
    seed), so scores do not depend on call order or batching. Scale 0 gives
    plain exact cosine. The noise stands in for an independent matcher whose
    errors decorrelate from the fast filter's quantization error.
    """

    supports_concurrent_calls = True

    def __init__(self, source, perturbation_scale: float = 0.0, seed: int = 0):
        if isinstance(source, GalleryIndex):
            if source.raw_vectors is None:
                raise ValueError(
                    "raw vectors missing: index was built with keep_raw=False")
            vectors, ids = source.raw_vectors, source.ids
            normalized = source.norm_applied
        else:
            vectors, ids = source
            normalized = False
        if perturbation_scale < 0:
            raise ValueError("perturbation scale must be nonnegative")
        self.vectors = vectors if normalized else normalize_rows(vectors)
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        self.scale = float(perturbation_scale)
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._sorter = np.argsort(self.ids)
        self._sorted_ids = self.ids[self._sorter]

    def _rows(self, gallery_ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self._sorted_ids, gallery_ids)
        pos = np.clip(pos, 0, len(self._sorted_ids) - 1)
        if not np.all(self._sorted_ids[pos] == gallery_ids):
            bad = gallery_ids[self._sorted_ids[pos] != gallery_ids][0]
            raise ValueError(f"unknown gallery id {int(bad)}")
        return self._sorter[pos]

    def score_many(self, probe_vector, gallery_ids) -> np.ndarray:
        q32 = np.ascontiguousarray(probe_vector, dtype=np.float32)
        gids = np.ascontiguousarray(gallery_ids, dtype=np.uint64)
        rows = self._rows(gids)
        qn = l2_normalize(q32).astype(np.float64)
        # per-row double-precision reduction: the result for a gallery item
        # is independent of which other items share the batch
        scores = np.empty(rows.shape[0], dtype=np.float64)
        chunk = 65536
        for start in range(0, rows.shape[0], chunk):
            stop = min(start + chunk, rows.shape[0])
            block = self.vectors[rows[start:stop]].astype(np.float64)
            scores[start:stop] = np.sum(block * qn, axis=1)
        if self.scale > 0.0:
            digest = hashlib.blake2b(q32.tobytes(), digest_size=8).digest()
            probe_key = _mix64(
                np.uint64(int.from_bytes(digest, "little")) ^ _mix64(self.seed))
            scores += self.scale * _hash_normal(probe_key, gids)
        return scores

    def score(self, probe_vector, gallery_id: int) -> float:
        return float(self.score_many(probe_vector,
                                     np.array([gallery_id], dtype=np.uint64))[0])


def save_score_file(path, records) -> None:
    """Write slow-matcher scores: magic, then (probe_id, gallery_id, f32 score).

    Accepts either the nested mapping load_score_file returns or an iterable
    of (probe_id, gallery_id, score) triples.
    """
    if isinstance(records, dict):
        records = [(pid, gid, score)
                   for pid, row in records.items()
                   for gid, score in row.items()]
    with open(path, "wb") as f:
        f.write(_SM_MAGIC)
        for probe_id, gallery_id, score in records:
            f.write(_SM_RECORD.pack(int(probe_id), int(gallery_id), float(score)))


def load_score_file(path) -> dict:
    """Read a score file into {probe_id: {gallery_id: score}}."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4 or magic != _SM_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_SM_MAGIC!r}")
        payload = f.read()
    if len(payload) % _SM_RECORD.size != 0:
        raise ValueError(
            f"truncated payload: {len(payload)} bytes is not a whole number "
            f"of {_SM_RECORD.size}-byte records"
        )
    table: dict = {}
    for off in range(0, len(payload), _SM_RECORD.size):
        pid, gid, score = _SM_RECORD.unpack_from(payload, off)
        table.setdefault(pid, {})[gid] = float(score)
    return table


class ScoreFileSlowMatcher(SlowMatcher):
    """Slow matcher backed by precomputed scores from an external matcher.

    Scores are keyed by (probe_id, gallery_id), so bind a probe id first:
    matcher.for_probe(pid).score(vec, gid) ignores the vector entirely.
    """

    supports_concurrent_calls = True

    def __init__(self, source):
        self.table = load_score_file(source) if not isinstance(source, dict) \
            else source
        self.probe_id = None

    def for_probe(self, probe_id: int) -> "ScoreFileSlowMatcher":
        bound = ScoreFileSlowMatcher(self.table)
        bound.probe_id = int(probe_id)
        return bound

    def score(self, probe_vector, gallery_id: int) -> float:
        if self.probe_id is None:
            raise ValueError("no probe bound: call for_probe(probe_id) first")
        probe_scores = self.table.get(self.probe_id)
        if probe_scores is None or int(gallery_id) not in probe_scores:
            raise ValueError(
                f"no stored score for probe {self.probe_id}, "
                f"gallery {int(gallery_id)}"
            )
        return probe_scores[int(gallery_id)]

    def score_many(self, probe_vector, gallery_ids) -> np.ndarray:
        return np.array([self.score(probe_vector, int(g)) for g in gallery_ids],
                        dtype=np.float64)


def _borda_order(cand_ids: np.ndarray, slow: np.ndarray):
    """Rank-sum fusion of the fast ordering and the slow-score ordering."""
    k = len(cand_ids)
    fast_rank = np.arange(1, k + 1, dtype=np.int64)
    perm_slow = np.lexsort((cand_ids, -slow))
    slow_rank = np.empty(k, dtype=np.int64)
    slow_rank[perm_slow] = np.arange(1, k + 1)
    sums = fast_rank + slow_rank
    order = np.lexsort((cand_ids, sums))
    return cand_ids[order], -sums[order].astype(np.float64)


def rerank_candidates(cand: CandidateList, slow_scores,
                      strategy) -> CandidateList:
    """Re-order a candidate list given slow-matcher scores for its entries.

    DF_THEN_COTS z-scores both matchers' scores over the candidates and
    sum-fuses; DF_THEN_COTS_ONLY re-sorts purely by the slow matcher;
    DF_THEN_COTS_RANK fuses the two orderings by rank sums.
    """
    strategy = FusionStrategy(strategy)
    slow = np.asarray(slow_scores, dtype=np.float64)
    if slow.shape != cand.ids.shape:
        raise ValueError("one slow score per candidate is required")
    if strategy is FusionStrategy.DF_THEN_COTS:
        fused = sum_fuse(zscore_normalize(cand.scores), zscore_normalize(slow))
        order = np.lexsort((cand.ids, -fused))
        return CandidateList(ids=cand.ids[order], scores=fused[order])
    if strategy is FusionStrategy.DF_THEN_COTS_ONLY:
        order = np.lexsort((cand.ids, -slow))
        return CandidateList(ids=cand.ids[order], scores=slow[order])
    if strategy is FusionStrategy.DF_THEN_COTS_RANK:
        ids, scores = _borda_order(cand.ids, slow)
        return CandidateList(ids=ids, scores=scores)
    raise ValueError(f"strategy {strategy.value} does not re-rank a "
                     "candidate list")


def cascade_search(index: GalleryIndex, slow_matcher: SlowMatcher, query,
                   k: int, strategy=FusionStrategy.DF_THEN_COTS) -> CandidateList:
    """Two-stage search: fast filter to k candidates, then slow re-ranking.

    DF_PLUS_COTS is the one single-stage strategy: it fuses fast and slow
    scores over the whole gallery and then truncates to k.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.DF_PLUS_COTS:
        fast = adc_scan(index, query)
        slow = slow_matcher.score_many(query, index.ids)
        fused = sum_fuse(zscore_normalize(fast), zscore_normalize(slow))
        top_ids, top_scores = select_top_k(fused, index.ids, k)
        return CandidateList(ids=top_ids, scores=top_scores)

    cand = search_pq(index, query, k)
    slow = slow_matcher.score_many(query, cand.ids)
    return rerank_candidates(cand, slow, strategy)
