"""Command-line interface.

Each subcommand is a thin composition of library calls: dataset generation,
codebook training, index building, search, cascaded search, evaluation, and
benchmarking. Results go to user-specified paths; logs go to standard error.
Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .benchmark import BenchConfig, run_k_sweep, run_scaling_bench
from .evaluation import (build_report, probe_result_from_candidates,
                         report_to_json, report_to_text,
                         write_probe_results_jsonl)
from .gallery import (Metric, build_index, default_candidate_size, load_index,
                      save_index, search_exact, search_pq)
from .quantizer import (load_codebook, save_codebook, train_codebooks)
from .rerank import (FusionStrategy, ReferenceSlowMatcher,
                     ScoreFileSlowMatcher, cascade_search, load_score_file)
from .store import generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("pqcascade")

STRATEGY_CHOICES = [s.value for s in FusionStrategy] + ["fast-only"]


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE",
                        help="key=value file preloading any flag; "
                             "command-line flags win conflicts")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="cap on worker threads (default: machine cores)")


def _parse_k(value: str):
    if value == "auto":
        return "auto"
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("k must be >= 1 or 'auto'")
    return k


def _int_list(value: str):
    return [int(tok) for tok in value.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqcascade",
        description="Quantized filter-and-refine similarity search over "
                    "embedding galleries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic embedding set")
    _add_common(p)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--images-per-subject", type=int, default=1)
    p.add_argument("--dim", type=int, default=320)
    p.add_argument("--noise", type=float, default=0.3,
                   help="within-subject noise scale")
    p.add_argument("--poor-fraction", type=float, default=0.0,
                   help="fraction of records flagged poorly aligned")
    p.add_argument("--subject-prefix", default="s")
    p.add_argument("--id-offset", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-codebook", help="train sub-space codebooks")
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--z", type=int, default=256)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-index", help="encode a dataset into an index")
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--no-raw", action="store_true",
                   help="drop raw vectors (quantized-only index)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="top-k search for each query row")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=_parse_k, default=10)
    p.add_argument("--exact", action="store_true",
                   help="scan raw vectors instead of quantized codes")
    p.add_argument("--metric", choices=[m.value for m in Metric],
                   default=Metric.COSINE.value,
                   help="distance for --exact scans")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cascade-search",
                       help="filter-and-refine search for each query row")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=_parse_k, default="auto")
    p.add_argument("--strategy", choices=[s.value for s in FusionStrategy],
                   default=FusionStrategy.DF_THEN_COTS.value)
    p.add_argument("--scores", metavar="FILE",
                   help="stored slow-matcher scores; default is the "
                        "reference matcher over raw vectors")
    p.add_argument("--perturbation", type=float, default=0.0,
                   help="reference-matcher noise scale")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="rank + threshold metrics for probes")
    _add_common(p)
    p.add_argument("--gallery", required=True,
                   help="gallery dataset (.fve); subjects define mates")
    p.add_argument("--probes", required=True,
                   help="probe dataset (.fve); subjects absent from the "
                        "gallery make a probe an impostor")
    p.add_argument("--codebook", help="trained codebook; trained on the "
                                      "gallery when omitted")
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--z", type=int, default=256)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--k", type=_parse_k, default="auto")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES,
                   default=FusionStrategy.DF_THEN_COTS.value)
    p.add_argument("--scores", metavar="FILE",
                   help="stored slow-matcher scores keyed by probe id")
    p.add_argument("--perturbation", type=float, default=0.0)
    p.add_argument("--far", type=_float_list, default=[0.01, 0.1],
                   help="comma-separated FAR targets")
    p.add_argument("--num-thresholds", type=int, default=100)
    p.add_argument("--out-prefix", required=True,
                   help="writes PREFIX.results.jsonl, PREFIX.report.json, "
                        "PREFIX.report.txt")

    p = sub.add_parser("bench", help="scaling or candidate-size benchmark")
    _add_common(p)
    p.add_argument("--mode", choices=["scaling", "k-sweep"],
                   default="scaling")
    p.add_argument("--sizes", type=_int_list, required=True,
                   help="comma-separated gallery sizes")
    p.add_argument("--k-values", type=_int_list, default=[],
                   help="comma-separated candidate sizes (k-sweep mode)")
    p.add_argument("--dim", type=int, default=320)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--z", type=int, default=256)
    p.add_argument("--subjects", type=int, default=200)
    p.add_argument("--images-per-subject", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--perturbation", type=float, default=0.05)
    p.add_argument("--strategies", default=None,
                   help="comma-separated strategy names")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--memory-ceiling-gb", type=float, default=4.0)
    p.add_argument("--out-prefix", required=True,
                   help="writes PREFIX.json and PREFIX.csv")
    return parser


def _float_list(value: str):
    return [float(tok) for tok in value.split(",") if tok.strip()]


def _apply_config_file(argv: list) -> list:
    """Expand `--config FILE` into flags placed before explicit ones.

    The file is line-oriented key=value; '#' starts a comment. Booleans
    toggle store_true flags. Later (command-line) occurrences win because
    argparse keeps the last value seen.
    """
    if not argv or argv[0].startswith("-"):
        return argv
    try:
        pos = argv.index("--config")
    except ValueError:
        return argv
    if pos + 1 >= len(argv):
        return argv  # argparse reports the missing value
    path = argv[pos + 1]
    flags = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (expected key=value): {line!r}")
            key, value = (tok.strip() for tok in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "false"):
                if value.lower() == "true":
                    flags.append(flag)
            else:
                flags.extend([flag, value])
    return [argv[0]] + flags + argv[1:]


def _resolve_k(k, n: int) -> int:
    if k == "auto":
        resolved = default_candidate_size(n)
        log.info("resolved k=auto to %d (gallery size %d)", resolved, n)
        return resolved
    return int(k)


def _write_hits_jsonl(path, query_ids, candidate_lists) -> None:
    """One JSON line per (query, result) pair, rank starting at 1."""
    with open(path, "w") as f:
        for qid, cand in zip(query_ids, candidate_lists):
            for rank, (gid, score) in enumerate(cand.entries, start=1):
                f.write(json.dumps({
                    "query_id": int(qid),
                    "gallery_id": gid,
                    "rank": rank,
                    "score": score,
                }) + "\n")


def _cmd_gen_data(ns) -> int:
    ds = generate_synthetic(ns.subjects, ns.images_per_subject, ns.dim,
                            ns.noise, ns.poor_fraction, ns.seed,
                            subject_prefix=ns.subject_prefix,
                            id_offset=ns.id_offset)
    save_dataset(ds, ns.out)
    log.info("wrote %d records (dim %d) to %s", len(ds), ds.dim, ns.out)
    return 0


def _cmd_train_codebook(ns) -> int:
    from .store import normalize_rows
    ds = load_dataset(ns.infile)
    codebook = train_codebooks(normalize_rows(ds.vectors), ns.m, ns.z,
                               max_iters=ns.iters, seed=ns.seed,
                               threads=ns.threads)
    save_codebook(codebook, ns.out)
    log.info("trained %dx%d codebook on %d rows -> %s",
             ns.m, ns.z, len(ds), ns.out)
    return 0


def _cmd_build_index(ns) -> int:
    ds = load_dataset(ns.infile)
    codebook = load_codebook(ns.codebook)
    index = build_index(ds, codebook, keep_raw=not ns.no_raw)
    save_index(index, ns.out)
    log.info("indexed %d records -> %s (raw vectors %s)",
             len(ds), ns.out, "dropped" if ns.no_raw else "kept")
    return 0


def _cmd_search(ns) -> int:
    index = load_index(ns.index)
    queries = load_dataset(ns.query)
    k = _resolve_k(ns.k, len(index.ids))
    hits = []
    for row in queries.vectors:
        if ns.exact:
            hits.append(search_exact(index, row, k, Metric(ns.metric)))
        else:
            hits.append(search_pq(index, row, k))
    _write_hits_jsonl(ns.out, queries.ids, hits)
    log.info("searched %d queries (k=%d) -> %s", len(queries), k, ns.out)
    return 0


def _make_matcher(ns, index):
    if ns.scores:
        return ScoreFileSlowMatcher(load_score_file(ns.scores))
    return ReferenceSlowMatcher(index, perturbation_scale=ns.perturbation,
                                seed=ns.seed)


def _cmd_cascade_search(ns) -> int:
    index = load_index(ns.index)
    queries = load_dataset(ns.query)
    k = _resolve_k(ns.k, len(index.ids))
    matcher = _make_matcher(ns, index)
    hits = []
    for qid, row in zip(queries.ids, queries.vectors):
        probe_matcher = (matcher.for_probe(int(qid))
                         if isinstance(matcher, ScoreFileSlowMatcher)
                         else matcher)
        hits.append(cascade_search(index, probe_matcher, row, k,
                                   FusionStrategy(ns.strategy)))
    _write_hits_jsonl(ns.out, queries.ids, hits)
    log.info("cascade-searched %d queries (k=%d, strategy=%s) -> %s",
             len(queries), k, ns.strategy, ns.out)
    return 0


def _cmd_evaluate(ns) -> int:
    from .store import normalize_rows
    gallery = load_dataset(ns.gallery)
    probes = load_dataset(ns.probes)
    if ns.codebook:
        codebook = load_codebook(ns.codebook)
    else:
        log.info("no codebook given; training %dx%d on the gallery",
                 ns.m, ns.z)
        codebook = train_codebooks(normalize_rows(gallery.vectors), ns.m,
                                   ns.z, max_iters=ns.iters, seed=ns.seed,
                                   threads=ns.threads)
    index = build_index(gallery, codebook, keep_raw=True)
    k = _resolve_k(ns.k, len(gallery))
    matcher = _make_matcher(ns, index)

    mates_by_subject: dict = {}
    for i, subj in enumerate(gallery.subjects):
        mates_by_subject.setdefault(subj, []).append(int(gallery.ids[i]))

    genuine, impostor = [], []
    for i, row in enumerate(probes.vectors):
        pid = int(probes.ids[i])
        if ns.strategy == "fast-only":
            cand = search_pq(index, row, k)
        else:
            probe_matcher = (matcher.for_probe(pid)
                             if isinstance(matcher, ScoreFileSlowMatcher)
                             else matcher)
            cand = cascade_search(index, probe_matcher, row, k,
                                  FusionStrategy(ns.strategy))
        mates = mates_by_subject.get(probes.subjects[i], [])
        result = probe_result_from_candidates(pid, probes.subjects[i],
                                              cand, mates)
        (genuine if mates else impostor).append(result)

    report = build_report(genuine, impostor, far_targets=tuple(ns.far),
                          num_thresholds=ns.num_thresholds)
    write_probe_results_jsonl(f"{ns.out_prefix}.results.jsonl",
                              genuine + impostor)
    with open(f"{ns.out_prefix}.report.json", "w") as f:
        f.write(report_to_json(report))
    with open(f"{ns.out_prefix}.report.txt", "w") as f:
        f.write(report_to_text(report))
    log.info("evaluated %d genuine / %d impostor probes; mAP %.4f -> %s.*",
             len(genuine), len(impostor), report.map_score, ns.out_prefix)
    return 0


def _cmd_bench(ns) -> int:
    strategies = None
    if ns.strategies:
        strategies = [s if s == "fast-only" else FusionStrategy(s)
                      for s in ns.strategies.split(",") if s]
    kwargs = dict(
        gallery_sizes=ns.sizes,
        candidate_sizes=ns.k_values,
        dim=ns.dim, m=ns.m, z=ns.z, seed=ns.seed,
        num_subjects=ns.subjects,
        images_per_subject=ns.images_per_subject,
        within_class_noise=ns.noise,
        perturbation_scale=ns.perturbation,
        repetitions=ns.reps,
        thread_count=ns.threads,
        memory_ceiling_gb=ns.memory_ceiling_gb,
    )
    if strategies is not None:
        kwargs["strategies"] = strategies
    config = BenchConfig(**kwargs)
    report = (run_k_sweep(config) if ns.mode == "k-sweep"
              else run_scaling_bench(config))
    report.write_json(f"{ns.out_prefix}.json")
    report.write_csv(f"{ns.out_prefix}.csv")
    log.info("bench mode=%s wrote %s.json and %s.csv",
             ns.mode, ns.out_prefix, ns.out_prefix)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-codebook": _cmd_train_codebook,
    "build-index": _cmd_build_index,
    "search": _cmd_search,
    "cascade-search": _cmd_cascade_search,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
}


def dispatch(argv) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(argv)
    try:
        argv = _apply_config_file(argv)
        ns = build_parser().parse_args(argv)
        resolved = {key: value for key, value in sorted(vars(ns).items())
                    if key != "command"}
        log.info("command %s with %s", ns.command, resolved)
        return _COMMANDS[ns.command](ns)
    except (ValueError, OSError, MemoryError, KeyError) as exc:
        log.error("%s", exc)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
