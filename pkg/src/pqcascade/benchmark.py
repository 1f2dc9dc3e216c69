"""Desk-scale benchmark harness: search timing and accuracy versus gallery
size and candidate-list size.

One synthetic gallery is built per run: mated subjects first, then a pool of
distractors. Gallery sizes are realized as nested prefixes over a single
enrollment (one codebook, one encoding pass per size), so accuracy trends
across sizes are not confounded by retraining. Timings use a monotonic
clock, exclude a warm-up pass, and report minimum and mean over repetitions.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import _kernels
from .evaluation import ProbeResult, mean_average_precision
from .gallery import (CandidateList, GalleryIndex, adc_scan, build_index,
                      default_candidate_size, exact_cosine_scores, search_pq,
                      select_top_k)
from .quantizer import train_codebooks
from .rerank import FusionStrategy, ReferenceSlowMatcher, rerank_candidates
from .store import Dataset, generate_synthetic, normalize_rows

FAST_ONLY = "fast-only"


@dataclass
class BenchConfig:
    gallery_sizes: list
    candidate_sizes: list = field(default_factory=list)
    dim: int = 320
    m: int = 64
    z: int = 256
    seed: int = 0
    num_subjects: int = 200
    images_per_subject: int = 4
    within_class_noise: float = 0.3
    perturbation_scale: float = 0.05
    strategies: list = field(default_factory=lambda: [
        FAST_ONLY,
        FusionStrategy.DF_THEN_COTS,
        FusionStrategy.DF_THEN_COTS_ONLY,
        FusionStrategy.DF_THEN_COTS_RANK,
    ])
    candidate_cap: int = 50_000
    kmeans_iters: int = 25
    train_sample: int = 20_000
    repetitions: int = 3
    timing_queries: int = 3
    thread_count: int = 1
    memory_ceiling_gb: float = 4.0

    def validate(self):
        if not self.gallery_sizes or min(self.gallery_sizes) < 1:
            raise ValueError("gallery_sizes must be non-empty and positive")
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3 for timing")
        if self.dim % self.m != 0:
            raise ValueError(f"dim {self.dim} not divisible by m {self.m}")
        if min(self.gallery_sizes) < self.mated_gallery_size():
            raise ValueError(
                f"smallest gallery size {min(self.gallery_sizes)} cannot hold "
                f"{self.mated_gallery_size()} mated records"
            )

    def mated_gallery_size(self) -> int:
        return self.num_subjects * self.images_per_subject


@dataclass
class BenchReport:
    meta: dict
    cells: list

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "cells": self.cells}, indent=2)

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    def write_csv(self, path) -> None:
        keys = []
        for cell in self.cells:
            for key in cell:
                if key not in keys:
                    keys.append(key)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.cells)


def measure_seconds(fn, repetitions: int):
    """Min and mean wall seconds over repetitions, after one warm-up call."""
    fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times), sum(times) / len(times)


@dataclass
class _BenchWorld:
    """Shared state for one benchmark run: gallery pool, probes, codebook."""

    gallery: Dataset
    probe_vectors: np.ndarray
    probe_subjects: list
    mates_by_subject: dict
    codebook: object
    train_seconds: float


def _check_memory(config: BenchConfig):
    n = max(config.gallery_sizes)
    code_bytes = 1 if config.z <= 256 else 2
    est = n * (config.dim * 4 * 2 + config.m * code_bytes + 8 + 64)
    ceiling = config.memory_ceiling_gb * 1024 ** 3
    if est > ceiling:
        raise MemoryError(
            f"estimated working set {est / 1024**3:.2f} GiB exceeds the "
            f"configured ceiling {config.memory_ceiling_gb:.2f} GiB"
        )


def _build_world(config: BenchConfig) -> _BenchWorld:
    config.validate()
    _check_memory(config)
    per = config.images_per_subject + 1  # one held-out probe per subject
    mated = generate_synthetic(
        config.num_subjects, per, config.dim, config.within_class_noise,
        0.0, config.seed,
    )
    rows = np.arange(len(mated))
    probe_mask = (rows % per) == per - 1
    probe_vectors = mated.vectors[probe_mask].copy()
    probe_subjects = [mated.subjects[i] for i in np.nonzero(probe_mask)[0]]

    keep = np.nonzero(~probe_mask)[0]
    mate_ds = Dataset(
        dim=config.dim,
        ids=mated.ids[keep],
        subjects=[mated.subjects[i] for i in keep],
        well_aligned=mated.well_aligned[keep],
        vectors=mated.vectors[keep],
    )
    mates_by_subject: dict = {}
    for i, subj in enumerate(mate_ds.subjects):
        mates_by_subject.setdefault(subj, []).append(int(mate_ds.ids[i]))

    n_distract = max(config.gallery_sizes) - len(mate_ds)
    if n_distract > 0:
        distractors = generate_synthetic(
            n_distract, 1, config.dim, 0.0, 0.0, config.seed + 1,
            subject_prefix="d", id_offset=len(mated),
        )
        gallery = Dataset(
            dim=config.dim,
            ids=np.concatenate([mate_ds.ids, distractors.ids]),
            subjects=mate_ds.subjects + distractors.subjects,
            well_aligned=np.concatenate([mate_ds.well_aligned,
                                         distractors.well_aligned]),
            vectors=np.vstack([mate_ds.vectors, distractors.vectors]),
        )
    else:
        gallery = mate_ds

    train_rows = min(len(gallery), max(config.train_sample, config.z))
    t0 = time.perf_counter()
    codebook = train_codebooks(
        normalize_rows(gallery.vectors[:train_rows]), config.m, config.z,
        max_iters=config.kmeans_iters, seed=config.seed + 2,
        threads=config.thread_count,
    )
    train_seconds = time.perf_counter() - t0
    return _BenchWorld(
        gallery=gallery,
        probe_vectors=probe_vectors,
        probe_subjects=probe_subjects,
        mates_by_subject=mates_by_subject,
        codebook=codebook,
        train_seconds=train_seconds,
    )


def _index_prefix(world: _BenchWorld, config: BenchConfig, n: int):
    """Enroll the first n gallery rows; returns (index, enrollment seconds)."""
    prefix = Dataset(
        dim=world.gallery.dim,
        ids=world.gallery.ids[:n],
        subjects=world.gallery.subjects[:n],
        well_aligned=world.gallery.well_aligned[:n],
        vectors=world.gallery.vectors[:n],
    )
    t0 = time.perf_counter()
    index = build_index(prefix, world.codebook, keep_raw=True)
    return index, world.train_seconds + (time.perf_counter() - t0)


def _probe_results(world, index, matcher, k, strategy):
    """Run one strategy over every probe; returns ProbeResults."""
    out = []
    for i in range(world.probe_vectors.shape[0]):
        q = world.probe_vectors[i]
        if strategy == FAST_ONLY:
            cand = search_pq(index, q, k)
        else:
            cand = search_pq(index, q, k)
            slow = matcher.score_many(q, cand.ids)
            cand = rerank_candidates(cand, slow, strategy)
        out.append(ProbeResult(
            probe_id=i,
            subject=world.probe_subjects[i],
            ranked_ids=cand.ids,
            ranked_scores=cand.scores,
            mate_gallery_ids=frozenset(
                world.mates_by_subject[world.probe_subjects[i]]),
        ))
    return out


def _strategy_name(strategy) -> str:
    return strategy if isinstance(strategy, str) else strategy.value


def _scan_timings(index: GalleryIndex, queries: np.ndarray, repetitions: int):
    """Scan-only timings (no selection): exact cosine versus PQ table scan."""
    _kernels.warm_up()

    def exact_pass():
        for q in queries:
            exact_cosine_scores(index.raw_vectors, q, index.norm_applied)

    def pq_pass():
        for q in queries:
            adc_scan(index, q)

    with threadpool_limits(limits=1):
        exact_min, exact_mean = measure_seconds(exact_pass, repetitions)
        pq_min, pq_mean = measure_seconds(pq_pass, repetitions)
    nq = len(queries)
    return {
        "exact_scan_seconds_min": exact_min / nq,
        "exact_scan_seconds_mean": exact_mean / nq,
        "pq_scan_seconds_min": pq_min / nq,
        "pq_scan_seconds_mean": pq_mean / nq,
    }


def run_scaling_bench(config: BenchConfig) -> BenchReport:
    """Accuracy and timing per gallery size for every configured strategy."""
    world = _build_world(config)
    cells = []
    for n in sorted(config.gallery_sizes):
        index, enroll_seconds = _index_prefix(world, config, n)
        k = default_candidate_size(n, config.candidate_cap)
        matcher = ReferenceSlowMatcher(
            index, perturbation_scale=config.perturbation_scale,
            seed=config.seed + 3)
        nq = min(config.timing_queries, len(world.probe_vectors))
        timing_queries = world.probe_vectors[:nq]
        cell = {"N": n, "k": k, "strategy": "scan-timing",
                "enrollment_seconds": enroll_seconds}
        cell.update(_scan_timings(index, timing_queries, config.repetitions))
        cells.append(cell)

        for strategy in config.strategies:
            name = _strategy_name(strategy)

            def one_pass():
                for q in timing_queries:
                    if name == FAST_ONLY:
                        search_pq(index, q, k)
                    else:
                        slow = matcher.score_many(
                            q, search_pq(index, q, k).ids)

            with threadpool_limits(limits=1):
                t_min, t_mean = measure_seconds(one_pass, config.repetitions)
            results = _probe_results(world, index, matcher, k, strategy)
            cells.append({
                "N": n,
                "k": k,
                "strategy": name,
                "mAP": mean_average_precision(results),
                "search_seconds_min": t_min / nq,
                "search_seconds_mean": t_mean / nq,
                "enrollment_seconds": enroll_seconds,
            })
    meta = {
        "mode": "scaling",
        "dim": config.dim, "m": config.m, "z": config.z,
        "seed": config.seed,
        "num_subjects": config.num_subjects,
        "images_per_subject": config.images_per_subject,
        "within_class_noise": config.within_class_noise,
        "perturbation_scale": config.perturbation_scale,
        "repetitions": config.repetitions,
        "probes": len(world.probe_vectors),
    }
    return BenchReport(meta=meta, cells=cells)


def run_k_sweep(config: BenchConfig) -> BenchReport:
    """mAP per (gallery size, candidate size); reports argmax-k per size.

    The full ADC ordering per probe is computed once per gallery size and
    each k takes its prefix, which matches per-k searches exactly because
    top-k output is prefix-stable in k. Slow scores depend only on the
    (probe, gallery id) pair, so they are computed at the largest k and
    sliced.
    """
    if not config.candidate_sizes:
        raise ValueError("candidate_sizes must be non-empty for a k sweep")
    world = _build_world(config)
    strategies = [s for s in config.strategies if s != FAST_ONLY]
    if not strategies:
        strategies = [FusionStrategy.DF_THEN_COTS]
    cells = []
    argmax = {}
    for n in sorted(config.gallery_sizes):
        index, enroll_seconds = _index_prefix(world, config, n)
        matcher = ReferenceSlowMatcher(
            index, perturbation_scale=config.perturbation_scale,
            seed=config.seed + 3)
        k_values = sorted({min(k, n) for k in config.candidate_sizes})
        k_max = max(k_values)
        per_probe = []
        for i in range(world.probe_vectors.shape[0]):
            q = world.probe_vectors[i]
            sims = adc_scan(index, q)
            top_ids, top_sims = select_top_k(sims, index.ids, k_max)
            slow = matcher.score_many(q, top_ids)
            per_probe.append((top_ids, top_sims, slow))

        for strategy in strategies:
            name = _strategy_name(strategy)
            best_k, best_map = None, -1.0
            for k in k_values:
                results = []
                for i, (top_ids, top_sims, slow) in enumerate(per_probe):
                    cand = CandidateList(ids=top_ids[:k], scores=top_sims[:k])
                    fused = rerank_candidates(cand, slow[:k], strategy)
                    results.append(ProbeResult(
                        probe_id=i,
                        subject=world.probe_subjects[i],
                        ranked_ids=fused.ids,
                        ranked_scores=fused.scores,
                        mate_gallery_ids=frozenset(
                            world.mates_by_subject[world.probe_subjects[i]]),
                    ))
                m = mean_average_precision(results)
                cells.append({
                    "N": n, "k": k, "strategy": name, "mAP": m,
                    "enrollment_seconds": enroll_seconds,
                })
                if m > best_map:
                    best_k, best_map = k, m
            argmax[f"{name}@N={n}"] = best_k
    meta = {
        "mode": "k-sweep",
        "dim": config.dim, "m": config.m, "z": config.z,
        "seed": config.seed,
        "num_subjects": config.num_subjects,
        "images_per_subject": config.images_per_subject,
        "within_class_noise": config.within_class_noise,
        "perturbation_scale": config.perturbation_scale,
        "probes": len(world.probe_vectors),
        "argmax_k": argmax,
    }
    return BenchReport(meta=meta, cells=cells)
