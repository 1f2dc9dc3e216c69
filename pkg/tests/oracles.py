"""Independent reference implementations used to check library outputs.

Everything here is written as directly as possible (full sorts, explicit
loops, double precision) and deliberately shares no code with the package.
"""

import numpy as np


def full_sort_ranking(scores, ids):
    """All ids ordered by (score descending, id ascending)."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [int(ids[i]) for i in order], [float(scores[i]) for i in order]


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def squared_l2(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def nearest_centroid(sub_vector, centroids):
    """Index of the closest centroid, lowest index winning ties."""
    best, best_d = 0, None
    for j in range(centroids.shape[0]):
        d = squared_l2(sub_vector, centroids[j])
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


def pq_encode(codebook_centroids, vector):
    """Codes for one vector given (m, z, d/m) centroids."""
    m = codebook_centroids.shape[0]
    sub = np.asarray(vector, dtype=np.float64).reshape(m, -1)
    return [nearest_centroid(sub[i], codebook_centroids[i]) for i in range(m)]


def pq_decode(codebook_centroids, codes):
    return np.concatenate(
        [codebook_centroids[i][codes[i]] for i in range(len(codes))]
    ).astype(np.float64)


def lloyd_sse(points, centroids):
    """Sum of squared distances from each point to its nearest centroid."""
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    d2 = ((pts[:, None, :] - cen[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def average_precision(ranked_ids, mate_ids):
    """Mean of precision at each retrieved mate's rank, over all mates.

    Mates never retrieved contribute zero, matching a recall-weighted
    reading where each mate carries 1/len(mate_ids) of the mass.
    """
    mates = set(int(g) for g in mate_ids)
    hits = 0
    total = 0.0
    for rank, gid in enumerate(ranked_ids, start=1):
        if int(gid) in mates:
            hits += 1
            total += hits / rank
    return total / len(mates)


def cmc(best_ranks, max_rank):
    """Fraction of probes whose best mate rank is <= each rank."""
    out = []
    n = len(best_ranks)
    for r in range(1, max_rank + 1):
        out.append(sum(1 for b in best_ranks if b <= r) / n)
    return out


def far_at_threshold(impostor_top_scores, threshold):
    n = len(impostor_top_scores)
    return sum(1 for s in impostor_top_scores if s >= threshold) / n


def tar_at_threshold(genuine_scores, threshold):
    n = len(genuine_scores)
    return sum(1 for s in genuine_scores if s >= threshold) / n


def threshold_for_far(impostor_top_scores, target):
    """Smallest observed score accepted while keeping FAR <= target."""
    if target >= 1.0:
        return float("-inf")
    best = None
    for t in sorted(set(impostor_top_scores)):
        if far_at_threshold(impostor_top_scores, t) <= target:
            best = t
            break
    if best is None:
        return float(np.nextafter(max(impostor_top_scores), np.inf))
    return float(best)


def fnir(genuine_top_scores, threshold):
    n = len(genuine_top_scores)
    return sum(1 for s in genuine_top_scores if s < threshold) / n


def fpir(impostor_top_scores, threshold):
    return far_at_threshold(impostor_top_scores, threshold)


def dir_at(genuine_rank_and_top, rank, threshold):
    """Fraction of genuine probes with best mate rank <= rank and top-1
    score >= threshold."""
    n = len(genuine_rank_and_top)
    good = sum(1 for best_rank, top in genuine_rank_and_top
               if best_rank <= rank and top >= threshold)
    return good / n


def open_set_map(probe_rows, threshold):
    """probe_rows: (ranked_ids, mate_ids, top_score); rejected probes
    score zero."""
    vals = []
    for ranked_ids, mate_ids, top in probe_rows:
        if top >= threshold:
            vals.append(average_precision(ranked_ids, mate_ids))
        else:
            vals.append(0.0)
    return sum(vals) / len(vals)


def zscore(values):
    v = np.asarray(values, dtype=np.float64)
    return (v - v.mean()) / v.std()
