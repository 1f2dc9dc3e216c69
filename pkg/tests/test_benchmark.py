import csv
import json

import numpy as np
import pytest

from pqcascade import (BenchConfig, BenchReport, FAST_ONLY, FusionStrategy,
                       ProbeResult, ReferenceSlowMatcher, cascade_search,
                       mean_average_precision, measure_seconds,
                       rerank_candidates, run_k_sweep, run_scaling_bench,
                       search_pq)
from pqcascade.benchmark import _build_world, _check_memory, _index_prefix


def tiny_config(**overrides):
    base = dict(
        gallery_sizes=[30, 60],
        candidate_sizes=[5, 10, 30, 100],
        dim=16,
        m=4,
        z=16,
        seed=7,
        num_subjects=8,
        images_per_subject=2,
        within_class_noise=0.3,
        perturbation_scale=0.05,
        kmeans_iters=5,
        repetitions=3,
        timing_queries=2,
    )
    base.update(overrides)
    return BenchConfig(**base)


class TestConfig:
    def test_valid(self):
        tiny_config().validate()

    def test_empty_sizes(self):
        with pytest.raises(ValueError, match="non-empty"):
            tiny_config(gallery_sizes=[]).validate()

    def test_too_few_repetitions(self):
        with pytest.raises(ValueError, match="repetitions"):
            tiny_config(repetitions=2).validate()

    def test_dim_not_divisible(self):
        with pytest.raises(ValueError, match="not divisible"):
            tiny_config(dim=10, m=4).validate()

    def test_smallest_size_below_mated_pool(self):
        with pytest.raises(ValueError, match="cannot hold"):
            tiny_config(gallery_sizes=[10]).validate()

    def test_mated_gallery_size(self):
        assert tiny_config().mated_gallery_size() == 16


class TestMemoryGuard:
    def test_tiny_ceiling_trips(self):
        with pytest.raises(MemoryError, match="ceiling"):
            _check_memory(tiny_config(gallery_sizes=[2000],
                                      memory_ceiling_gb=0.0001))

    def test_end_to_end_guard(self):
        with pytest.raises(MemoryError):
            run_scaling_bench(tiny_config(gallery_sizes=[2000],
                                          memory_ceiling_gb=0.0001))

    def test_generous_ceiling_passes(self):
        _check_memory(tiny_config())


class TestMeasureSeconds:
    def test_warm_up_excluded_from_count(self):
        calls = []
        t_min, t_mean = measure_seconds(lambda: calls.append(1), 5)
        assert len(calls) == 6
        assert t_min <= t_mean

    def test_nonnegative(self):
        t_min, t_mean = measure_seconds(lambda: None, 3)
        assert t_min >= 0.0 and t_mean >= 0.0


@pytest.fixture(scope="module")
def scaling_report():
    return run_scaling_bench(tiny_config())


class TestScalingBench:

    def test_cell_count(self, scaling_report):
        # per gallery size: one scan-timing cell plus one cell per strategy
        assert len(scaling_report.cells) == 2 * (1 + 4)

    def test_scan_timing_cells(self, scaling_report):
        scans = [c for c in scaling_report.cells
                 if c["strategy"] == "scan-timing"]
        assert sorted(c["N"] for c in scans) == [30, 60]
        for c in scans:
            assert 0 < c["pq_scan_seconds_min"] <= c["pq_scan_seconds_mean"]
            assert 0 < c["exact_scan_seconds_min"] <= c["exact_scan_seconds_mean"]
            assert c["enrollment_seconds"] > 0

    def test_strategy_cells(self, scaling_report):
        names = {FAST_ONLY, "df-then-cots", "df-then-cots-only",
                 "df-then-cots-rank"}
        for n in (30, 60):
            got = {c["strategy"] for c in scaling_report.cells
                   if c["N"] == n}
            assert names <= got
        for c in scaling_report.cells:
            if c["strategy"] == "scan-timing":
                continue
            assert 0.0 <= c["mAP"] <= 1.0
            assert 0 < c["search_seconds_min"] <= c["search_seconds_mean"]

    def test_meta(self, scaling_report):
        assert scaling_report.meta["mode"] == "scaling"
        assert scaling_report.meta["probes"] == 8
        assert scaling_report.meta["dim"] == 16

    def test_map_reproducible_across_runs(self, scaling_report):
        again = run_scaling_bench(tiny_config())

        def accuracy(rep):
            return {(c["N"], c["strategy"]): c["mAP"]
                    for c in rep.cells if "mAP" in c}

        assert accuracy(again) == accuracy(scaling_report)


@pytest.fixture(scope="module")
def sweep_config():
    return tiny_config()


@pytest.fixture(scope="module")
def sweep_report(sweep_config):
    return run_k_sweep(sweep_config)


class TestKSweep:
    def test_requires_candidate_sizes(self):
        with pytest.raises(ValueError, match="candidate_sizes"):
            run_k_sweep(tiny_config(candidate_sizes=[]))

    def test_k_values_clamped_to_gallery(self, sweep_report):
        for n in (30, 60):
            ks = sorted({c["k"] for c in sweep_report.cells
                         if c["N"] == n})
            assert ks == sorted({min(k, n) for k in (5, 10, 30, 100)})

    def test_fast_only_excluded(self, sweep_report):
        assert FAST_ONLY not in {c["strategy"]
                                 for c in sweep_report.cells}

    def test_fast_only_alone_falls_back_to_fused(self):
        rep = run_k_sweep(tiny_config(strategies=[FAST_ONLY],
                                      gallery_sizes=[30],
                                      candidate_sizes=[5, 10]))
        assert {c["strategy"] for c in rep.cells} == {"df-then-cots"}

    def test_argmax_matches_cells(self, sweep_report):
        for key, best_k in sweep_report.meta["argmax_k"].items():
            name, n_part = key.split("@N=")
            rows = [c for c in sweep_report.cells
                    if c["strategy"] == name and c["N"] == int(n_part)]
            top = max(c["mAP"] for c in rows)
            winners = [c["k"] for c in rows if c["mAP"] == top]
            assert best_k == min(winners)

    def test_prefix_slicing_matches_direct_search(self, sweep_config,
                                                  sweep_report):
        """Each sweep cell must equal an independent per-k search run."""
        config = sweep_config
        world = _build_world(config)
        for n in (30, 60):
            index, _ = _index_prefix(world, config, n)
            matcher = ReferenceSlowMatcher(
                index, perturbation_scale=config.perturbation_scale,
                seed=config.seed + 3)
            for cell in [c for c in sweep_report.cells if c["N"] == n]:
                k = cell["k"]
                strategy = FusionStrategy(cell["strategy"])
                results = []
                for i in range(world.probe_vectors.shape[0]):
                    q = world.probe_vectors[i]
                    cand = search_pq(index, q, k)
                    fused = rerank_candidates(
                        cand, matcher.score_many(q, cand.ids), strategy)
                    results.append(ProbeResult(
                        probe_id=i,
                        subject=world.probe_subjects[i],
                        ranked_ids=fused.ids,
                        ranked_scores=fused.scores,
                        mate_gallery_ids=frozenset(
                            world.mates_by_subject[world.probe_subjects[i]]),
                    ))
                assert mean_average_precision(results) == cell["mAP"]

    def test_k_equal_to_n_matches_single_stage_fusion(self):
        """With k = N the cascade and whole-gallery fusion agree exactly."""
        n = 30
        config = tiny_config(gallery_sizes=[n], candidate_sizes=[n],
                             strategies=[FusionStrategy.DF_THEN_COTS])
        rep = run_k_sweep(config)
        world = _build_world(config)
        index, _ = _index_prefix(world, config, n)
        matcher = ReferenceSlowMatcher(
            index, perturbation_scale=config.perturbation_scale,
            seed=config.seed + 3)
        results = []
        for i in range(world.probe_vectors.shape[0]):
            cand = cascade_search(index, matcher, world.probe_vectors[i],
                                  n, FusionStrategy.DF_PLUS_COTS)
            results.append(ProbeResult(
                probe_id=i,
                subject=world.probe_subjects[i],
                ranked_ids=cand.ids,
                ranked_scores=cand.scores,
                mate_gallery_ids=frozenset(
                    world.mates_by_subject[world.probe_subjects[i]]),
            ))
        (cell,) = rep.cells
        assert cell["mAP"] == mean_average_precision(results)


class TestReportWriters:
    def make_report(self):
        return BenchReport(
            meta={"mode": "scaling", "dim": 4},
            cells=[
                {"N": 10, "strategy": "scan-timing", "pq_scan_seconds_min": 0.5},
                {"N": 10, "strategy": "fast-only", "mAP": 0.25, "k": 5},
            ],
        )

    def test_json_round_trip(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "r.json"
        report.write_json(path)
        doc = json.loads(path.read_text())
        assert doc == json.loads(report.to_json())
        assert doc["meta"]["mode"] == "scaling"
        assert len(doc["cells"]) == 2

    def test_csv_union_of_columns(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "r.csv"
        report.write_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert set(rows[0]) == {"N", "strategy", "pq_scan_seconds_min",
                                "mAP", "k"}
        assert rows[1]["mAP"] == "0.25"
        assert rows[0]["mAP"] == ""
