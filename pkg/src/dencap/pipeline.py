"""End-to-end stage orchestration: each stage reads the previous stage's
artifacts, writes its own under the output directory, and skips itself when
its inputs and configuration are unchanged."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import anonymizer, caption_parser, evaluator, prompting, vlm_client
from .catalog import ViewCategory, filter_views, ingest_manifest, load_catalog_jsonl, merge_catalogs, summarize
from .cropper import PaddingRule, crop_batch, load_detections
from .vlm_client import BackendSpec, RequestLog, RetryPolicy

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

logger = logging.getLogger(__name__)

CATALOG_FILE = "catalog.jsonl"
COUNTS_FILE = "counts.csv"
ANON_CATALOG_FILE = "catalog.anon.jsonl"
CROP_CATALOG_FILE = "catalog.crops.jsonl"
CROPS_DIR = "crops"
REQUEST_LOG_FILE = "requests.log.jsonl"
ACCURACY_FILE = "accuracy.csv"
DISEASE_FILE = "disease.csv"
JUDGMENTS_LOG_FILE = "judgments.log.jsonl"


def responses_file(level: int) -> str:
    return f"responses.level{level}.jsonl"


def captions_file(level: int) -> str:
    return f"captions.level{level}.jsonl"


GOOD_CAPTIONS_FILE = "captions.level2.good.jsonl"
REJECTED_CAPTIONS_FILE = "captions.level2.rejected.jsonl"


class MissingStageInput(Exception):
    def __init__(self, stage: str) -> None:
        super().__init__(f"missing-stage-input:{stage}")
        self.stage = stage


@dataclass
class PipelineConfig:
    manifests: list[Path] = field(default_factory=list)
    detections: Path | None = None
    work_dir: Path = Path("work")
    out_dir: Path = Path("out")
    views: list[str] | None = None
    padding: PaddingRule = field(default_factory=PaddingRule)
    backend: BackendSpec = field(default_factory=BackendSpec)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    concurrency: int = 4
    crop_workers: int = 1
    prompt_level1: Path | None = None
    prompt_level2: Path | None = None
    report_format: str = "text"
    judgments: Path | None = None
    review_host: str = "127.0.0.1"
    review_port: int = 8017
    limit_per_dataset: int | None = None
    shuffle_seed: int | None = None
    static_dir: Path | None = None

    @property
    def crops_dir(self) -> Path:
        return self.out_dir / CROPS_DIR

    def out(self, name: str) -> Path:
        return self.out_dir / name


def load_config(path: Path | str) -> PipelineConfig:
    """Read a TOML config file into a PipelineConfig."""
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    base = path.parent

    def _path(value: str | None) -> Path | None:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    config = PipelineConfig()
    paths = data.get("paths", {})
    config.manifests = [_path(m) for m in paths.get("manifests", [])]
    config.detections = _path(paths.get("detections"))
    if paths.get("work_dir"):
        config.work_dir = _path(paths["work_dir"])
    if paths.get("out_dir"):
        config.out_dir = _path(paths["out_dir"])

    padding = data.get("padding", {})
    if padding:
        per_view = dict(PaddingRule().per_view)
        for key, value in padding.items():
            per_view[ViewCategory(key)] = int(value)
        config.padding = PaddingRule(per_view=per_view)

    backend = data.get("backend", {})
    if backend:
        config.backend = BackendSpec(
            kind=backend.get("kind", "mock"),
            endpoint=backend.get("endpoint", ""),
            model_id=backend.get("model_id", ""),
            auth_env=backend.get("auth_env", ""),
            timeout=float(backend.get("timeout", 60.0)),
            fixtures_path=_path(backend.get("fixtures")),
        )

    retry = data.get("retry", {})
    if retry:
        config.retry = RetryPolicy(
            max_retries=int(retry.get("max_retries", 5)),
            base_delay=float(retry.get("base_delay", 1.0)),
            backoff_factor=float(retry.get("backoff_factor", 2.0)),
            jitter_fraction=float(retry.get("jitter_fraction", 0.1)),
        )

    pipeline = data.get("pipeline", {})
    config.concurrency = int(pipeline.get("concurrency", config.concurrency))
    config.crop_workers = int(pipeline.get("crop_workers", config.crop_workers))
    config.report_format = pipeline.get("report_format", config.report_format)
    config.prompt_level1 = _path(pipeline.get("prompt_level1"))
    config.prompt_level2 = _path(pipeline.get("prompt_level2"))
    if pipeline.get("views"):
        config.views = [str(v) for v in pipeline["views"]]

    review = data.get("review", {})
    config.review_host = review.get("host", config.review_host)
    config.review_port = int(review.get("port", config.review_port))
    if review.get("limit_per_dataset"):
        config.limit_per_dataset = int(review["limit_per_dataset"])
    if "shuffle_seed" in review:
        config.shuffle_seed = int(review["shuffle_seed"])
    config.static_dir = _path(review.get("static_dir"))
    if review.get("judgments"):
        config.judgments = _path(review["judgments"])
    return config


def _digest_file(path: Path) -> str:
    if not path.is_file():
        return f"missing:{path.name}"
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage_digest(stage: str, parts: list) -> str:
    payload = json.dumps([stage, parts], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _stamp_path(out_dir: Path, stage: str) -> Path:
    return out_dir / ".stamps" / f"{stage}.json"


def _should_skip(out_dir: Path, stage: str, digest: str, outputs: list[Path]) -> bool:
    stamp = _stamp_path(out_dir, stage)
    if not stamp.is_file():
        return False
    try:
        recorded = json.loads(stamp.read_text(encoding="utf-8")).get("digest")
    except (OSError, json.JSONDecodeError):
        return False
    if recorded != digest:
        return False
    if not all(p.exists() for p in outputs):
        return False
    logger.info("skip %s (unchanged)", stage)
    return True


def _write_stamp(out_dir: Path, stage: str, digest: str) -> None:
    stamp = _stamp_path(out_dir, stage)
    stamp.parent.mkdir(parents=True, exist_ok=True)
    stamp.write_text(json.dumps({"digest": digest}) + "\n", encoding="utf-8")


def stage_ingest(config: PipelineConfig) -> None:
    if not config.manifests or not all(Path(m).is_file() for m in config.manifests):
        raise MissingStageInput("ingest")
    digest = _stage_digest("ingest", [[_digest_file(Path(m)) for m in config.manifests], config.views])
    outputs = [config.out(CATALOG_FILE), config.out(COUNTS_FILE)]
    if _should_skip(config.out_dir, "ingest", digest, outputs):
        return
    catalog = merge_catalogs([ingest_manifest(m) for m in config.manifests])
    if config.views:
        catalog = filter_views(catalog, {ViewCategory(v) for v in config.views})
    config.out_dir.mkdir(parents=True, exist_ok=True)
    catalog.save_jsonl(config.out(CATALOG_FILE))
    config.out(COUNTS_FILE).write_text(summarize(catalog).render_csv(), encoding="utf-8")
    _write_stamp(config.out_dir, "ingest", digest)
    logger.info("ingest: %d records (%d excluded)", len(catalog), len(catalog) - len(catalog.active()))


def stage_anonymize(config: PipelineConfig) -> None:
    catalog_path = config.out(CATALOG_FILE)
    if not catalog_path.is_file():
        raise MissingStageInput("anonymize")
    digest = _stage_digest("anonymize", [_digest_file(catalog_path), str(config.work_dir)])
    outputs = [config.out(ANON_CATALOG_FILE), config.work_dir / anonymizer.MAPPING_FILENAME]
    if _should_skip(config.out_dir, "anonymize", digest, outputs):
        return
    catalog = load_catalog_jsonl(catalog_path)
    mapping = anonymizer.anonymize(catalog, config.work_dir)
    anonymizer.anonymized_catalog(catalog, mapping, config.work_dir).save_jsonl(config.out(ANON_CATALOG_FILE))
    _write_stamp(config.out_dir, "anonymize", digest)


def stage_crop(config: PipelineConfig) -> None:
    anon_path = config.out(ANON_CATALOG_FILE)
    if not anon_path.is_file() or config.detections is None or not Path(config.detections).is_file():
        raise MissingStageInput("crop")
    digest = _stage_digest(
        "crop",
        [
            _digest_file(anon_path),
            _digest_file(Path(config.detections)),
            {v.value: p for v, p in config.padding.per_view.items()},
        ],
    )
    outputs = [config.out(CROP_CATALOG_FILE)]
    if _should_skip(config.out_dir, "crop", digest, outputs):
        return
    catalog = load_catalog_jsonl(anon_path)
    detections = load_detections(config.detections)
    crops = crop_batch(catalog, detections, config.padding, config.crops_dir, workers=config.crop_workers)
    crops.save_jsonl(config.out(CROP_CATALOG_FILE))
    _write_stamp(config.out_dir, "crop", digest)


def _template_for(config: PipelineConfig, level: int) -> prompting.PromptTemplate:
    override = config.prompt_level1 if level == 1 else config.prompt_level2
    if override:
        template = prompting.load_template(override)
        if template.level != level:
            raise ValueError(f"prompt file {override} declares level {template.level}, expected {level}")
        return template
    return prompting.default_template(level)


def stage_caption(config: PipelineConfig, level: int) -> None:
    crop_path = config.out(CROP_CATALOG_FILE)
    if not crop_path.is_file():
        raise MissingStageInput("caption")
    template = _template_for(config, level)
    backend_parts = [
        config.backend.kind,
        config.backend.endpoint,
        config.backend.model_id,
        _digest_file(Path(config.backend.fixtures_path)) if config.backend.fixtures_path else "",
    ]
    digest = _stage_digest(
        f"caption{level}",
        [
            _digest_file(crop_path),
            template.level,
            template.body,
            backend_parts,
            [config.retry.max_retries, config.retry.base_delay, config.retry.backoff_factor],
            config.concurrency,
        ],
    )
    outputs = [config.out(responses_file(level)), config.out(captions_file(level))]
    if _should_skip(config.out_dir, f"caption{level}", digest, outputs):
        return

    catalog = load_catalog_jsonl(crop_path)
    backend = config.backend.build()
    log = RequestLog()
    responses, report = vlm_client.caption_batch(
        backend, catalog, template, config.retry, concurrency=config.concurrency, log=log
    )
    vlm_client.save_responses(responses, config.out(responses_file(level)))
    log.save_jsonl(config.out(REQUEST_LOG_FILE), append=True)
    dataset_by_item = {r.id: r.dataset_id for r in catalog.records}
    records = caption_parser.parse_batch(responses, dataset_by_item)
    caption_parser.save_captions(records, config.out(captions_file(level)))
    _write_stamp(config.out_dir, f"caption{level}", digest)
    logger.info("caption level %d: %d ok, %d failed", level, report.ok, report.failed)


def stage_filter(config: PipelineConfig) -> None:
    captions_path = config.out(captions_file(2))
    if not captions_path.is_file():
        raise MissingStageInput("filter")
    digest = _stage_digest("filter", [_digest_file(captions_path)])
    outputs = [config.out(GOOD_CAPTIONS_FILE), config.out(REJECTED_CAPTIONS_FILE)]
    if _should_skip(config.out_dir, "filter", digest, outputs):
        return
    records = caption_parser.load_captions(captions_path)
    good, rejected = caption_parser.quality_filter(records)
    caption_parser.save_captions(good, config.out(GOOD_CAPTIONS_FILE))
    caption_parser.save_captions(rejected, config.out(REJECTED_CAPTIONS_FILE))
    _write_stamp(config.out_dir, "filter", digest)
    logger.info("quality gate: %d good, %d rejected", len(good), len(rejected))


def stage_eval(config: PipelineConfig) -> str:
    good_path = config.out(GOOD_CAPTIONS_FILE)
    crop_path = config.out(CROP_CATALOG_FILE)
    if not good_path.is_file() or not crop_path.is_file():
        raise MissingStageInput("eval")
    judgments_digest = _digest_file(Path(config.judgments)) if config.judgments else ""
    digest = _stage_digest(
        "eval", [_digest_file(good_path), _digest_file(crop_path), judgments_digest, config.report_format]
    )
    report_name = "report.md" if config.report_format == "markdown" else "report.txt"
    outputs = [config.out(ACCURACY_FILE), config.out(DISEASE_FILE), config.out(report_name)]
    if _should_skip(config.out_dir, "eval", digest, outputs):
        return config.out(report_name).read_text(encoding="utf-8")

    records = caption_parser.load_captions(good_path)
    truth = load_catalog_jsonl(crop_path)
    accuracy_rows = evaluator.accuracy_table(records, truth)
    config.out(ACCURACY_FILE).write_text(evaluator.accuracy_csv(accuracy_rows), encoding="utf-8")

    disease_rows: list[evaluator.DiseaseAccuracyRow] = []
    if config.judgments and Path(config.judgments).is_file():
        judgments = evaluator.load_judgments(config.judgments)
        disease_rows = evaluator.disease_accuracy(judgments, records)
    config.out(DISEASE_FILE).write_text(evaluator.disease_csv(disease_rows), encoding="utf-8")

    report = evaluator.render_report(
        accuracy_rows=accuracy_rows,
        disease_rows=disease_rows,
        counts=None,
        fmt=config.report_format,
    )
    config.out(report_name).write_text(report, encoding="utf-8")
    _write_stamp(config.out_dir, "eval", digest)
    return report


RUN_ALL_STAGES = ("ingest", "anonymize", "crop", "caption1", "caption2", "filter", "eval")


def run_all(config: PipelineConfig) -> str:
    stage_ingest(config)
    stage_anonymize(config)
    stage_crop(config)
    stage_caption(config, 1)
    stage_caption(config, 2)
    stage_filter(config)
    return stage_eval(config)
