"""Quantized filter-and-refine similarity search for embedding galleries.

The pipeline: store embeddings, train per-sub-space codebooks, encode the
gallery into compact codes, scan codes with a lookup-table distance for a
candidate list, then optionally re-rank candidates with a slower, more
accurate matcher and fuse the two score sets. Evaluation and benchmark
harnesses cover closed-set and open-set retrieval metrics and desk-scale
timing studies.
"""

from .store import (Dataset, EmbeddingRecord, PCAModel, generate_synthetic,
                    l2_normalize, load_dataset, normalize_rows, pca_fit,
                    pca_transform, pca_transform_many, save_dataset)
from .quantizer import (DistanceTable, PQCode, PQCodebook, adc_distance,
                        build_distance_table, decode, encode, encode_many,
                        kmeans, load_codebook, save_codebook,
                        train_codebooks)
from .gallery import (CandidateList, GalleryIndex, Metric, adc_scan,
                      build_index, default_candidate_size, load_index,
                      save_index, search_exact, search_pq, select_top_k)
from .rerank import (FusionStrategy, ReferenceSlowMatcher,
                     ScoreFileSlowMatcher, SlowMatcher, cascade_search,
                     load_score_file, rank_fuse, rerank_candidates,
                     save_score_file, sum_fuse, zscore_normalize)
from .templates import (FaceTemplate, load_templates, save_templates,
                        select_comparison_subset, template_search,
                        template_similarity, templates_from_dataset)
from .evaluation import (EvalReport, ProbeResult, average_precision,
                         build_report, cmc_curve, dir_at_rank_far, fnir_fpir,
                         mean_average_precision, open_set_sweep,
                         precision_recall, probe_result_from_candidates,
                         report_to_json, report_to_text, tar_at_far,
                         threshold_for_far, write_probe_results_jsonl)
from .benchmark import (FAST_ONLY, BenchConfig, BenchReport,
                        measure_seconds, run_k_sweep, run_scaling_bench)

__version__ = "1.0.0"

__all__ = [
    "Dataset", "EmbeddingRecord", "PCAModel", "generate_synthetic",
    "l2_normalize", "load_dataset", "normalize_rows", "pca_fit",
    "pca_transform", "pca_transform_many", "save_dataset",
    "DistanceTable", "PQCode", "PQCodebook", "adc_distance",
    "build_distance_table", "decode", "encode", "encode_many", "kmeans",
    "load_codebook", "save_codebook", "train_codebooks",
    "CandidateList", "GalleryIndex", "Metric", "adc_scan", "build_index",
    "default_candidate_size", "load_index", "save_index", "search_exact",
    "search_pq", "select_top_k",
    "FusionStrategy", "ReferenceSlowMatcher", "ScoreFileSlowMatcher",
    "SlowMatcher", "cascade_search", "load_score_file", "rank_fuse",
    "rerank_candidates", "save_score_file", "sum_fuse", "zscore_normalize",
    "FaceTemplate", "load_templates", "save_templates",
    "select_comparison_subset", "template_search", "template_similarity",
    "templates_from_dataset",
    "EvalReport", "ProbeResult", "average_precision", "build_report",
    "cmc_curve", "dir_at_rank_far", "fnir_fpir", "mean_average_precision",
    "open_set_sweep", "precision_recall", "probe_result_from_candidates",
    "report_to_json", "report_to_text", "tar_at_far", "threshold_for_far",
    "write_probe_results_jsonl",
    "FAST_ONLY", "BenchConfig", "BenchReport", "measure_seconds",
    "run_k_sweep", "run_scaling_bench",
    "__version__",
]
