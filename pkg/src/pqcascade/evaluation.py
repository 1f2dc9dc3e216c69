"""Search-quality metrics: precision/recall, average precision and mAP,
open-set mAP versus FAR, CMC, TAR@FAR, FNIR/FPIR, DIR, and report emission.

Closed-set metrics assume every probe has gallery mates. Open-set metrics
gate each probe on its top-1 score: probes below threshold are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class ProbeResult:
    """One probe's ranked retrieval list plus its ground-truth mate ids."""

    probe_id: int
    subject: str | None
    ranked_ids: np.ndarray      # (r,) uint64, best first
    ranked_scores: np.ndarray   # (r,) float64, descending
    mate_gallery_ids: frozenset

    def __post_init__(self):
        self.ranked_ids = np.ascontiguousarray(self.ranked_ids, dtype=np.uint64)
        self.ranked_scores = np.ascontiguousarray(self.ranked_scores,
                                                  dtype=np.float64)
        if self.ranked_ids.shape != self.ranked_scores.shape:
            raise ValueError("ranked ids and scores disagree in length")
        if np.any(np.diff(self.ranked_scores) > 0):
            raise ValueError("ranked scores must be non-increasing")
        self.mate_gallery_ids = frozenset(int(g) for g in self.mate_gallery_ids)

    @property
    def ranked(self) -> list:
        return [(int(i), float(s))
                for i, s in zip(self.ranked_ids, self.ranked_scores)]

    @property
    def top_score(self) -> float:
        return float(self.ranked_scores[0]) if len(self.ranked_scores) else -math.inf

    def mate_mask(self) -> np.ndarray:
        if not self.mate_gallery_ids:
            return np.zeros(len(self.ranked_ids), dtype=bool)
        mates = np.fromiter(self.mate_gallery_ids, dtype=np.uint64)
        return np.isin(self.ranked_ids, mates)

    def best_mate_rank(self) -> float:
        """1-based rank of the highest-ranked mate; inf when none retrieved."""
        hits = np.nonzero(self.mate_mask())[0]
        return float(hits[0] + 1) if hits.size else math.inf


def probe_result_from_candidates(probe_id, subject, candidates,
                                 mate_gallery_ids) -> ProbeResult:
    return ProbeResult(
        probe_id=int(probe_id),
        subject=subject,
        ranked_ids=candidates.ids,
        ranked_scores=candidates.scores,
        mate_gallery_ids=frozenset(int(g) for g in mate_gallery_ids),
    )


def average_precision(result: ProbeResult) -> float:
    """Average precision: sum over ranks of P(k) * (R(k) - R(k-1)), R(0) = 0.

    Recall is measured against the full mate set, so mates missing from the
    ranked list contribute zero mass.
    """
    n_mates = len(result.mate_gallery_ids)
    if n_mates == 0:
        raise ValueError("empty mate set")
    hits = result.mate_mask()
    if not hits.any():
        return 0.0
    ranks = np.arange(1, len(hits) + 1, dtype=np.float64)
    precision = np.cumsum(hits, dtype=np.float64) / ranks
    recall_step = hits.astype(np.float64) / n_mates
    return float(np.sum(precision * recall_step))


def mean_average_precision(results) -> float:
    results = list(results)
    if not results:
        raise ValueError("empty result list")
    return float(np.mean([average_precision(r) for r in results]))


def precision_recall(result: ProbeResult, k: int):
    """Precision and recall of the top-k slice of one ranked list."""
    n = len(result.ranked_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k out of range: {k} not in [1, {n}]")
    n_mates = len(result.mate_gallery_ids)
    if n_mates == 0:
        raise ValueError("empty mate set")
    hits = int(np.count_nonzero(result.mate_mask()[:k]))
    return hits / k, hits / n_mates


def cmc_curve(results, max_rank: int | None = None) -> list:
    """Fraction of probes whose best mate appears at or below each rank."""
    results = list(results)
    if not results:
        raise ValueError("empty result list")
    best = np.array([r.best_mate_rank() for r in results])
    if max_rank is None:
        max_rank = max(len(r.ranked_ids) for r in results)
    ranks = np.arange(1, max_rank + 1)
    rates = np.mean(best[None, :] <= ranks[:, None], axis=1)
    return [(int(r), float(v)) for r, v in zip(ranks, rates)]


def threshold_for_far(impostor_scores, far_target: float) -> float:
    """Smallest threshold whose achieved FAR is at or below the target.

    Candidate thresholds are the observed impostor scores (acceptance is
    score >= threshold), plus -inf for accept-all and a value above the
    maximum for reject-all.
    """
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if imp.size == 0:
        raise ValueError("empty impostor score set")
    if far_target >= 1.0:
        return -math.inf
    vals = np.unique(imp)
    fars = (imp.size - np.searchsorted(imp, vals, side="left")) / imp.size
    ok = np.nonzero(fars <= far_target)[0]
    if ok.size:
        return float(vals[ok[0]])
    return float(np.nextafter(vals[-1], np.inf))


def tar_at_far(genuine_scores, impostor_scores, far_targets) -> list:
    """Verification operating points: (achieved FAR, TAR) per FAR target."""
    gen = np.asarray(genuine_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("empty score set")
    out = []
    for target in far_targets:
        t = threshold_for_far(imp, target)
        achieved = float(np.mean(imp >= t))
        tar = float(np.mean(gen >= t))
        out.append((achieved, tar))
    return out


def _check_open_set_inputs(genuine, impostor):
    genuine = list(genuine)
    impostor = list(impostor)
    if not impostor:
        raise ValueError("empty impostor set")
    for r in impostor:
        if r.mate_gallery_ids:
            raise ValueError(
                f"impostor probe {r.probe_id} has a non-empty mate set")
    return genuine, impostor


def open_set_sweep(genuine, impostor, thresholds) -> list:
    """(FAR, mAP) per threshold: rejected genuine probes score zero precision."""
    genuine, impostor = _check_open_set_inputs(genuine, impostor)
    if not genuine:
        raise ValueError("empty genuine set")
    gen_top = np.array([r.top_score for r in genuine])
    imp_top = np.array([r.top_score for r in impostor])
    avg_p = np.array([average_precision(r) for r in genuine])
    out = []
    for t in thresholds:
        far = float(np.mean(imp_top >= t))
        m = float(np.mean(np.where(gen_top >= t, avg_p, 0.0)))
        out.append((far, m))
    out.sort(key=lambda p: p[0])
    return out


def fnir_fpir(genuine, impostor, thresholds) -> list:
    """(FPIR, FNIR) per threshold, gated purely on each probe's top-1 score."""
    genuine, impostor = _check_open_set_inputs(genuine, impostor)
    if not genuine:
        raise ValueError("empty genuine set")
    gen_top = np.array([r.top_score for r in genuine])
    imp_top = np.array([r.top_score for r in impostor])
    out = []
    for t in thresholds:
        fpir = float(np.mean(imp_top >= t))
        fnir = float(np.mean(gen_top < t))
        out.append((fpir, fnir))
    out.sort(key=lambda p: (p[0], -p[1]))
    return out


def dir_at_rank_far(genuine, impostor, rank: int, far_target: float) -> float:
    """Fraction of genuine probes identified within the rank at the FAR's threshold.

    A probe counts only if its best mate rank is <= rank AND its top-1 score
    clears the threshold fixed by the impostor top-1 scores.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    genuine, impostor = _check_open_set_inputs(genuine, impostor)
    if not genuine:
        raise ValueError("empty genuine set")
    t = threshold_for_far(np.array([r.top_score for r in impostor]), far_target)
    hits = [
        1.0 if (r.best_mate_rank() <= rank and r.top_score >= t) else 0.0
        for r in genuine
    ]
    return float(np.mean(hits))


@dataclass
class EvalReport:
    """Bundle of every metric the harness computes, ready for serialization."""

    map_score: float
    pr_curve: list = field(default_factory=list)          # (recall, precision)
    cmc: list = field(default_factory=list)               # (rank, rate)
    tar_far: list = field(default_factory=list)           # (far, tar)
    dir_table: list = field(default_factory=list)         # (far, rank, dir)
    fnir_fpir: list = field(default_factory=list)         # (fpir, fnir)
    openset_map_far: list = field(default_factory=list)   # (far, mAP)
    num_genuine: int = 0
    num_impostor: int = 0


def build_report(genuine, impostor=(), far_targets=(0.01, 0.1),
                 dir_ranks=(1, 5), num_thresholds: int = 100) -> EvalReport:
    """Assemble the full report; open-set tables need impostor probes."""
    genuine = list(genuine)
    impostor = list(impostor)
    if not genuine:
        raise ValueError("empty genuine set")
    report = EvalReport(
        map_score=mean_average_precision(genuine),
        cmc=cmc_curve(genuine),
        num_genuine=len(genuine),
        num_impostor=len(impostor),
    )
    min_len = min(len(r.ranked_ids) for r in genuine)
    pr = []
    for k in range(1, min_len + 1):
        points = [precision_recall(r, k) for r in genuine]
        precision = float(np.mean([p for p, _ in points]))
        recall = float(np.mean([r for _, r in points]))
        pr.append((recall, precision))
    report.pr_curve = sorted(pr)
    if impostor:
        gen_ver = []
        for r in genuine:
            mask = r.mate_mask()
            if mask.any():
                gen_ver.append(float(r.ranked_scores[mask].max()))
        imp_ver = [r.top_score for r in impostor]
        if gen_ver:
            report.tar_far = tar_at_far(gen_ver, imp_ver, far_targets)
        pooled = np.array([r.top_score for r in genuine + impostor])
        thresholds = np.linspace(pooled.min(), pooled.max(), num_thresholds)
        report.fnir_fpir = fnir_fpir(genuine, impostor, thresholds)
        report.openset_map_far = open_set_sweep(genuine, impostor, thresholds)
        report.dir_table = [
            (far, rank, dir_at_rank_far(genuine, impostor, rank, far))
            for far in far_targets for rank in dir_ranks
        ]
    return report


def report_to_json(report: EvalReport) -> str:
    payload = {
        "mAP": report.map_score,
        "num_genuine": report.num_genuine,
        "num_impostor": report.num_impostor,
        "pr_curve": [{"recall": r, "precision": p} for r, p in report.pr_curve],
        "cmc": [{"rank": r, "rate": v} for r, v in report.cmc],
        "tar_far": [{"far": f, "tar": t} for f, t in report.tar_far],
        "dir_table": [{"far": f, "rank": r, "dir": d}
                      for f, r, d in report.dir_table],
        "fnir_fpir": [{"fpir": a, "fnir": b} for a, b in report.fnir_fpir],
        "openset_map_far": [{"far": f, "mAP": m}
                            for f, m in report.openset_map_far],
    }
    return json.dumps(payload, indent=2)


def report_to_text(report: EvalReport) -> str:
    """Aligned-column rendering for terminals and logs."""
    lines = [
        f"probes: {report.num_genuine} genuine, {report.num_impostor} impostor",
        f"mAP: {report.map_score:.6f}",
    ]
    if report.cmc:
        lines.append("")
        lines.append(f"{'rank':>6}  {'cmc':>10}")
        shown = [p for p in report.cmc if p[0] <= 10] or report.cmc[:10]
        for rank, rate in shown:
            lines.append(f"{rank:>6}  {rate:>10.6f}")
    if report.tar_far:
        lines.append("")
        lines.append(f"{'far':>10}  {'tar':>10}")
        for far, tar in report.tar_far:
            lines.append(f"{far:>10.6f}  {tar:>10.6f}")
    if report.dir_table:
        lines.append("")
        lines.append(f"{'far':>10}  {'rank':>6}  {'dir':>10}")
        for far, rank, d in report.dir_table:
            lines.append(f"{far:>10.6f}  {rank:>6}  {d:>10.6f}")
    if report.openset_map_far:
        lines.append("")
        lines.append(f"{'far':>10}  {'open-set mAP':>14}")
        step = max(1, len(report.openset_map_far) // 10)
        for far, m in report.openset_map_far[::step]:
            lines.append(f"{far:>10.6f}  {m:>14.6f}")
    return "\n".join(lines) + "\n"


def write_probe_results_jsonl(path, results, accept_threshold=-math.inf) -> None:
    """One JSON line per probe: ranked entries plus the acceptance flag."""
    with open(path, "w") as f:
        for r in results:
            row = {
                "probe_id": int(r.probe_id),
                "results": [
                    {"gallery_id": int(g), "score": float(s), "rank": i + 1}
                    for i, (g, s) in enumerate(zip(r.ranked_ids, r.ranked_scores))
                ],
                "accepted": bool(r.top_score >= accept_threshold),
            }
            f.write(json.dumps(row) + "\n")
