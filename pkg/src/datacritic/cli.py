"""Command-line entry point for the curation pipeline.

Exit codes: 0 success, 1 validation/config failure, 2 backend failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_io
from . import pipeline as pipe
from .corpus import CorpusError, RecordValidationError
from .experts import BackendError
from .inject import build_tiered_set
from .metrics import estimator_comparison, score_distribution_summary
from .pipeline import ConfigError, PipelineConfig, load_config

logger = logging.getLogger("datacritic")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datacritic",
                                     description="Critique, fuse, and refine an SFT corpus")
    parser.add_argument("--config", type=Path, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--concurrency", type=int, help="override the backend fan-out limit")
    parser.add_argument("--allow-partial", action="store_true",
                        help="keep going when individual backend requests fail")
    parser.add_argument("--allow-missing-priors", action="store_true",
                        help="attach empty priors to samples without one")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="attach vision priors to the corpus")
    sub.add_parser("critique", help="collect critiques from the roster")
    sub.add_parser("fuse", help="fuse stored critiques into consensus labels")
    sub.add_parser("grpo-train", help="train the toy critic on fused labels")
    sub.add_parser("rewrite", help="request candidate rewrites")
    sub.add_parser("select", help="rescore candidate pools and emit the refined corpus")
    sub.add_parser("run-all", help="run all four stages")

    p_inject = sub.add_parser("inject", help="build a tiered QA evaluation set")
    p_inject.add_argument("--items", type=Path, required=True, help="JSONL of correct qa_item rows")
    p_inject.add_argument("--counts", type=int, nargs=3, metavar=("H", "M", "L"),
                          default=(160, 170, 170))
    p_inject.add_argument("--out", type=Path, required=True)

    p_eval = sub.add_parser("eval", help="correlation and distribution reports")
    p_eval.add_argument("--out", type=Path, help="report directory (default: out_dir)")

    p_filter = sub.add_parser("filter", help="threshold baseline: drop low-scored samples")
    p_filter.add_argument("--threshold", type=float, required=True)
    p_filter.add_argument("--out", type=Path, help="filtered corpus path")

    return parser


def _load_pipeline_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.concurrency is not None:
        config.concurrency_limit = args.concurrency
    if args.allow_partial:
        config.allow_partial = True
    if args.allow_missing_priors:
        config.allow_missing_priors = True
    config.validate()
    return config


def _out_dir(config: PipelineConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_ingest(config: PipelineConfig) -> None:
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    priors = pipe.run_stage1(samples, config.priors_path,
                             allow_missing=config.allow_missing_priors,
                             out_dir=_out_dir(config))
    print(f"attached priors for {len(priors)} samples -> {pipe.STAGE1_PRIORS}")


def _cmd_critique(config: PipelineConfig) -> None:
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    out = _out_dir(config)
    priors = pipe.run_stage1(samples, config.priors_path,
                             allow_missing=config.allow_missing_priors, out_dir=out)
    critiques, fused = pipe.run_stage2(samples, priors, pipe.build_roster(config),
                                       config.fusion, out_dir=out,
                                       concurrency_limit=config.concurrency_limit,
                                       allow_partial=config.allow_partial)
    print(f"wrote {len(critiques)} critiques and {len(fused)} fused labels")


def _cmd_fuse(config: PipelineConfig) -> None:
    # Re-fuse from persisted critiques without calling any backend.
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    out = _out_dir(config)
    critiques = corpus_io.load_corpus(out / pipe.STAGE2_CRITIQUES, "critique")
    by_key = {(c.sample_id, c.expert_id): c.score for c in critiques}
    expert_ids = [spec["expert_id"] for spec in config.experts]
    usable = [s for s in samples if all((s.id, e) in by_key for e in expert_ids)]
    if not usable:
        raise RecordValidationError("no sample has a complete critique set")
    matrix = np.array([[by_key[(s.id, e)] for e in expert_ids] for s in usable])
    from .fusion import fuse_pipeline

    fused = fuse_pipeline(matrix, [s.domain for s in usable], config.fusion,
                          sample_ids=[s.id for s in usable], expert_ids=expert_ids)
    corpus_io.save_corpus(fused, out / pipe.STAGE2_FUSED)
    print(f"fused {len(fused)} samples -> {pipe.STAGE2_FUSED}")


def _cmd_grpo_train(config: PipelineConfig) -> None:
    out = _out_dir(config)
    fused = corpus_io.load_corpus(out / pipe.STAGE2_FUSED, "fused_label")
    _, curve = pipe.run_stage3(fused, config.grpo, config.train, seed=config.seed,
                               out_dir=out)
    print(f"trained toy critic for {len(curve)} steps -> {pipe.STAGE3_CURVE}")


def _cmd_rewrite(config: PipelineConfig) -> None:
    from .experts import request_rewrites

    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    out = _out_dir(config)
    critiques = corpus_io.load_corpus(out / pipe.STAGE2_CRITIQUES, "critique")
    fused = corpus_io.load_corpus(out / pipe.STAGE2_FUSED, "fused_label")
    rewrites = request_rewrites(samples, critiques, fused, pipe.build_roster(config),
                                concurrency_limit=config.concurrency_limit,
                                allow_partial=config.allow_partial)
    pools = [corpus_io.CandidatePool(sample_id=s.id, candidates=[s.answer] + rewrites[s.id])
             for s in samples if s.id in rewrites]
    corpus_io.save_corpus(pools, out / pipe.STAGE4_POOLS)
    print(f"wrote {len(pools)} candidate pools -> {pipe.STAGE4_POOLS}")


def _cmd_select(config: PipelineConfig) -> None:
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    out = _out_dir(config)
    priors = pipe.run_stage1(samples, config.priors_path,
                             allow_missing=config.allow_missing_priors)
    critiques = corpus_io.load_corpus(out / pipe.STAGE2_CRITIQUES, "critique")
    fused = corpus_io.load_corpus(out / pipe.STAGE2_FUSED, "fused_label")
    _, refined = pipe.run_stage4(samples, priors, critiques, fused,
                                 pipe.build_roster(config), pipe.build_rescorer(config),
                                 out_dir=out, concurrency_limit=config.concurrency_limit,
                                 allow_partial=config.allow_partial)
    print(f"selected {len(refined)} refined entries -> {pipe.STAGE4_REFINED}")


def _cmd_run_all(config: PipelineConfig) -> None:
    manifest = pipe.run_all(config)
    stages = ", ".join(stage["name"] for stage in manifest["stages"])
    print(f"run complete ({stages}); manifest -> {pipe.MANIFEST}")


def _cmd_inject(args) -> None:
    items = corpus_io.load_corpus(args.items, "qa_item")
    seed = args.seed if args.seed is not None else 0
    tiered = build_tiered_set(items, tuple(args.counts), seed)
    corpus_io.save_corpus(tiered, args.out)
    print(f"wrote {len(tiered)} tiered items -> {args.out}")


def _cmd_eval(config: PipelineConfig, args) -> None:
    out = Path(args.out) if args.out else _out_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    fused = corpus_io.load_corpus(Path(config.out_dir) / pipe.STAGE2_FUSED, "fused_label")
    fused_by_id = {f.sample_id: f.fused_score for f in fused}
    scored = [s for s in samples if s.id in fused_by_id]
    scores = [fused_by_id[s.id] for s in scored]
    report: dict = {"distribution": score_distribution_summary(scores)}

    critiques_path = Path(config.out_dir) / pipe.STAGE2_CRITIQUES
    latents = [s.latent_truth for s in scored]
    if all(v is not None for v in latents) and critiques_path.exists():
        critiques = corpus_io.load_corpus(critiques_path, "critique")
        by_key = {(c.sample_id, c.expert_id): c.score for c in critiques}
        expert_ids = [spec["expert_id"] for spec in config.experts]
        matrix = np.array([[by_key[(s.id, e)] for e in expert_ids] for s in scored])
        report["estimators"] = estimator_comparison(latents, matrix, scores, expert_ids)

    with (out / "eval_report.json").open("w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    hist = report["distribution"]["histogram"]
    with (out / "score_histogram.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for i, count in enumerate(hist["counts"]):
            writer.writerow([hist["bin_edges"][i], hist["bin_edges"][i + 1], count])
    print(f"wrote eval_report.json and score_histogram.csv -> {out}")


def _cmd_filter(config: PipelineConfig, args) -> None:
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    fused = corpus_io.load_corpus(Path(config.out_dir) / pipe.STAGE2_FUSED, "fused_label")
    kept = pipe.filter_corpus(samples, fused, args.threshold)
    out_path = args.out or (Path(config.out_dir) / "filtered_corpus.jsonl")
    corpus_io.save_corpus(kept, out_path)
    print(f"kept {len(kept)}/{len(samples)} samples with score >= {args.threshold} -> {out_path}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inject":
            _cmd_inject(args)
            return EXIT_OK
        config = _load_pipeline_config(args)
        if args.command == "ingest":
            _cmd_ingest(config)
        elif args.command == "critique":
            _cmd_critique(config)
        elif args.command == "fuse":
            _cmd_fuse(config)
        elif args.command == "grpo-train":
            _cmd_grpo_train(config)
        elif args.command == "rewrite":
            _cmd_rewrite(config)
        elif args.command == "select":
            _cmd_select(config)
        elif args.command == "eval":
            _cmd_eval(config, args)
        elif args.command == "filter":
            _cmd_filter(config, args)
        elif args.command == "run-all":
            _cmd_run_all(config)
        return EXIT_OK
    except (CorpusError, pipe.StageError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except BackendError as exc:
        logger.error("backend failure: %s", exc)
        return EXIT_BACKEND
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
