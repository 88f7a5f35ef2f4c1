"""dencap command line: one subcommand per pipeline stage, plus run-all."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .anonymizer import AnonymizerError
from .caption_parser import load_captions
from .catalog import CatalogError, load_catalog_jsonl
from .cropper import CropperError
from .pipeline import (
    CROP_CATALOG_FILE,
    GOOD_CAPTIONS_FILE,
    JUDGMENTS_LOG_FILE,
    MissingStageInput,
    PipelineConfig,
    captions_file,
    load_config,
    run_all,
    stage_anonymize,
    stage_caption,
    stage_crop,
    stage_eval,
    stage_filter,
    stage_ingest,
)
from .prompting import PromptingError
from .review_service import ReviewServiceError, ReviewStore, serve
from .vlm_client import BackendSpec

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--out-dir", type=Path, help="output directory for stage artifacts")
    parser.add_argument("--work-dir", type=Path, help="anonymized working directory")
    parser.add_argument("-v", "--verbose", action="store_true")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend-kind", choices=["mock", "http"])
    parser.add_argument("--endpoint", help="chat-completions endpoint URL (http backend)")
    parser.add_argument("--model-id")
    parser.add_argument("--auth-env", help="env var holding the bearer token")
    parser.add_argument("--fixtures", type=Path, help="mock fixture table (hash -> response JSON)")
    parser.add_argument("--timeout", type=float)
    parser.add_argument("--concurrency", type=int)
    parser.add_argument("--max-retries", type=int)
    parser.add_argument("--base-delay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dencap", description="single-tooth caption dataset pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read manifests into the catalog and counts table")
    _add_common(p)
    p.add_argument("--manifest", type=Path, action="append", help="manifest CSV/JSONL (repeatable)")
    p.add_argument("--views", help="comma-separated views to keep (default: all)")

    p = sub.add_parser("anonymize", help="copy images under generic names")
    _add_common(p)

    p = sub.add_parser("crop", help="cut detection boxes into single-tooth crops")
    _add_common(p)
    p.add_argument("--detections", type=Path, help="detections JSONL")
    p.add_argument("--crop-workers", type=int)

    p = sub.add_parser("caption", help="caption crops through the VLM backend")
    _add_common(p)
    p.add_argument("--level", type=int, choices=[1, 2], required=True)
    p.add_argument("--prompt-file", type=Path, help="override the level's prompt template")
    _add_backend_flags(p)

    p = sub.add_parser("filter", help="apply the quality gate to level-2 captions")
    _add_common(p)

    p = sub.add_parser("eval", help="compute accuracy tables and reports")
    _add_common(p)
    p.add_argument("--judgments", type=Path, help="review judgments JSONL for the disease table")
    p.add_argument("--format", choices=["text", "csv", "markdown"])

    p = sub.add_parser("review", help="serve review tasks to the expert UI")
    _add_common(p)
    p.add_argument("--serve", action="store_true", help="start the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--captions", type=Path, help="caption records JSONL (default: filtered good captions)")
    p.add_argument("--catalog", type=Path, help="crop catalog JSONL used to locate images")
    p.add_argument("--judgments-log", type=Path, help="append-only judgment log path")
    p.add_argument("--limit-per-dataset", type=int)
    p.add_argument("--shuffle-seed", type=int)
    p.add_argument("--static-dir", type=Path, help="built review UI to serve at /")

    p = sub.add_parser("run-all", help="run every stage in order")
    _add_common(p)
    p.add_argument("--manifest", type=Path, action="append")
    p.add_argument("--views")
    p.add_argument("--detections", type=Path)
    p.add_argument("--crop-workers", type=int)
    p.add_argument("--prompt-file-level1", type=Path)
    p.add_argument("--prompt-file-level2", type=Path)
    p.add_argument("--judgments", type=Path)
    p.add_argument("--format", choices=["text", "csv", "markdown"])
    _add_backend_flags(p)

    return parser


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    """Assemble the effective config: flag > file > default."""
    config = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()

    if getattr(args, "out_dir", None):
        config.out_dir = args.out_dir
    if getattr(args, "work_dir", None):
        config.work_dir = args.work_dir
    if getattr(args, "manifest", None):
        config.manifests = list(args.manifest)
    if getattr(args, "views", None):
        config.views = [v.strip() for v in args.views.split(",") if v.strip()]
    if getattr(args, "detections", None):
        config.detections = args.detections
    if getattr(args, "crop_workers", None):
        config.crop_workers = args.crop_workers
    if getattr(args, "judgments", None):
        config.judgments = args.judgments
    if getattr(args, "format", None):
        config.report_format = args.format
    if getattr(args, "concurrency", None):
        config.concurrency = args.concurrency

    if getattr(args, "prompt_file", None):
        if args.level == 1:
            config.prompt_level1 = args.prompt_file
        else:
            config.prompt_level2 = args.prompt_file
    if getattr(args, "prompt_file_level1", None):
        config.prompt_level1 = args.prompt_file_level1
    if getattr(args, "prompt_file_level2", None):
        config.prompt_level2 = args.prompt_file_level2

    backend_overrides = {
        "kind": getattr(args, "backend_kind", None),
        "endpoint": getattr(args, "endpoint", None),
        "model_id": getattr(args, "model_id", None),
        "auth_env": getattr(args, "auth_env", None),
        "timeout": getattr(args, "timeout", None),
        "fixtures_path": getattr(args, "fixtures", None),
    }
    if any(v is not None for v in backend_overrides.values()):
        spec = config.backend
        config.backend = BackendSpec(
            kind=backend_overrides["kind"] or spec.kind,
            endpoint=backend_overrides["endpoint"] or spec.endpoint,
            model_id=backend_overrides["model_id"] or spec.model_id,
            auth_env=backend_overrides["auth_env"] or spec.auth_env,
            timeout=backend_overrides["timeout"] or spec.timeout,
            fixtures_path=backend_overrides["fixtures_path"] or spec.fixtures_path,
        )
    if getattr(args, "max_retries", None) is not None or getattr(args, "base_delay", None) is not None:
        retry = config.retry
        config.retry = type(retry)(
            max_retries=args.max_retries if args.max_retries is not None else retry.max_retries,
            base_delay=args.base_delay if args.base_delay is not None else retry.base_delay,
            backoff_factor=retry.backoff_factor,
            jitter_fraction=retry.jitter_fraction,
        )

    if getattr(args, "host", None):
        config.review_host = args.host
    if getattr(args, "port", None):
        config.review_port = args.port
    if getattr(args, "limit_per_dataset", None):
        config.limit_per_dataset = args.limit_per_dataset
    if getattr(args, "shuffle_seed", None) is not None:
        config.shuffle_seed = args.shuffle_seed
    if getattr(args, "static_dir", None):
        config.static_dir = args.static_dir
    return config


def _run_review(args: argparse.Namespace, config: PipelineConfig) -> int:
    captions_path = args.captions or config.out(GOOD_CAPTIONS_FILE)
    if not Path(captions_path).is_file():
        fallback = config.out(captions_file(2))
        if not args.captions and fallback.is_file():
            captions_path = fallback
        else:
            raise MissingStageInput("review")
    catalog_path = args.catalog or config.out(CROP_CATALOG_FILE)
    log_path = args.judgments_log or config.judgments or config.out(JUDGMENTS_LOG_FILE)

    records = load_captions(captions_path)
    image_paths: dict[str, Path] = {}
    if Path(catalog_path).is_file():
        catalog = load_catalog_jsonl(catalog_path)
        image_paths = {r.id: r.source_path for r in catalog.active()}
    store = ReviewStore(
        records,
        image_paths,
        log_path,
        limit_per_dataset=config.limit_per_dataset,
        shuffle_seed=config.shuffle_seed,
    )
    if not args.serve:
        progress = store.progress()
        print(f"tasks: {progress['overall']['total']} total, {progress['overall']['judged']} judged")
        for dataset, stats in progress["datasets"].items():
            print(f"  {dataset}: {stats['judged']}/{stats['total']} judged")
        return 0
    serve(store, host=config.review_host, port=config.review_port, static_dir=config.static_dir)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _build_config(args)
        if args.command == "ingest":
            stage_ingest(config)
        elif args.command == "anonymize":
            stage_anonymize(config)
        elif args.command == "crop":
            stage_crop(config)
        elif args.command == "caption":
            stage_caption(config, args.level)
        elif args.command == "filter":
            stage_filter(config)
        elif args.command == "eval":
            print(stage_eval(config))
        elif args.command == "review":
            return _run_review(args, config)
        elif args.command == "run-all":
            print(run_all(config))
        return 0
    except MissingStageInput as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (CatalogError, AnonymizerError, CropperError, PromptingError, ReviewServiceError) as exc:
        print(f"error:{exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error:{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
