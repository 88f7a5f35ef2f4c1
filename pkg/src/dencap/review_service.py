"""Local HTTP service that serves review tasks and collects expert judgments."""

from __future__ import annotations

import json
import logging
import mimetypes
import random
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse, HTMLResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .caption_parser import CaptionRecord, quality_filter
from .evaluator import CORE_VERDICT_CONDITIONS, ReviewJudgment, Verdict

logger = logging.getLogger(__name__)


class ReviewServiceError(ValueError):
    pass


@dataclass
class ReviewTask:
    item_id: str
    dataset_id: str
    short_caption: str
    long_caption: str
    conditions: list[str]
    ordinal: int

    def to_json_obj(self) -> dict:
        return {
            "item_id": self.item_id,
            "dataset_id": self.dataset_id,
            "short_caption": self.short_caption,
            "long_caption": self.long_caption,
            "conditions": self.conditions,
            "image_url": f"/api/image/{self.item_id}",
            "ordinal": self.ordinal,
        }


def _round_robin(records: list[CaptionRecord], limit_per_dataset: int | None, seed: int | None) -> list[CaptionRecord]:
    """Interleave records across datasets so every category gets sampled."""
    groups: dict[str, list[CaptionRecord]] = {}
    for record in records:
        groups.setdefault(record.dataset_id or "", []).append(record)
    if seed is not None:
        rng = random.Random(seed)
        for group in groups.values():
            rng.shuffle(group)
    if limit_per_dataset:
        groups = {ds: group[:limit_per_dataset] for ds, group in groups.items()}
    ordered: list[CaptionRecord] = []
    names = sorted(groups)
    depth = max((len(g) for g in groups.values()), default=0)
    for i in range(depth):
        for name in names:
            if i < len(groups[name]):
                ordered.append(groups[name][i])
    return ordered


class ReviewStore:
    """Task queue plus append-only judgment log with an in-memory index.

    Tasks come only from quality-good caption records. Writes are serialized;
    reads work over immutable snapshots, so concurrent reviewers are safe.
    """

    def __init__(
        self,
        records: list[CaptionRecord],
        image_paths: dict[str, Path],
        log_path: Path | str,
        limit_per_dataset: int | None = None,
        shuffle_seed: int | None = None,
    ) -> None:
        good, _ = quality_filter(records)
        ordered = _round_robin(good, limit_per_dataset, shuffle_seed)
        self.tasks = [
            ReviewTask(
                item_id=r.item_id,
                dataset_id=r.dataset_id or "",
                short_caption=r.short_caption,
                long_caption=r.long_caption,
                conditions=sorted(tag.render() for tag in r.conditions),
                ordinal=i,
            )
            for i, r in enumerate(ordered)
        ]
        self.by_item = {t.item_id: t for t in self.tasks}
        self.image_paths = image_paths
        self.log_path = Path(log_path)
        self._lock = threading.Lock()
        self.judgments: list[ReviewJudgment] = []
        if self.log_path.is_file():
            with self.log_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.judgments.append(ReviewJudgment.from_json_obj(json.loads(line)))
            logger.info("rebuilt judgment index: %d entries", len(self.judgments))

    def _judged_items(self, reviewer_id: str | None = None) -> set[str]:
        return {
            j.item_id
            for j in self.judgments
            if reviewer_id is None or j.reviewer_id == reviewer_id
        }

    def next_task(self, reviewer_id: str) -> ReviewTask | None:
        """Lowest-ordinal task this reviewer has not judged yet; None when done."""
        if not reviewer_id:
            raise ReviewServiceError("unknown-reviewer")
        judged = self._judged_items(reviewer_id)
        for task in self.tasks:
            if task.item_id not in judged:
                return task
        return None

    def submit_judgment(self, reviewer_id: str, item_id: str, verdicts: dict[str, str]) -> ReviewJudgment:
        """Append one judgment; resubmission supersedes (latest wins downstream)."""
        if not reviewer_id:
            raise ReviewServiceError("unknown-reviewer")
        if item_id not in self.by_item:
            raise ReviewServiceError(f"unknown-item:{item_id}")
        missing = [c for c in CORE_VERDICT_CONDITIONS if c not in verdicts]
        if missing:
            raise ReviewServiceError("missing-conditions:" + ",".join(missing))
        try:
            parsed = {k: Verdict(v) for k, v in verdicts.items()}
        except ValueError as exc:
            raise ReviewServiceError(f"bad-verdict:{exc}") from exc

        judgment = ReviewJudgment(
            item_id=item_id,
            reviewer_id=reviewer_id,
            verdicts=parsed,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        with self._lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(judgment.to_json_obj(), ensure_ascii=False) + "\n")
            self.judgments.append(judgment)
        return judgment

    def export_jsonl(self) -> str:
        """Full log as JSONL, stable order: timestamp, then item_id."""
        ordered = sorted(self.judgments, key=lambda j: (j.timestamp, j.item_id))
        return "".join(json.dumps(j.to_json_obj(), ensure_ascii=False) + "\n" for j in ordered)

    def progress(self, reviewer_id: str | None = None) -> dict:
        judged = self._judged_items(reviewer_id)
        per_dataset: dict[str, dict[str, int]] = {}
        for task in self.tasks:
            stats = per_dataset.setdefault(task.dataset_id, {"judged": 0, "pending": 0, "total": 0})
            stats["total"] += 1
            if task.item_id in judged:
                stats["judged"] += 1
            else:
                stats["pending"] += 1
        total = len(self.tasks)
        done = sum(1 for t in self.tasks if t.item_id in judged)
        return {
            "datasets": {k: per_dataset[k] for k in sorted(per_dataset)},
            "overall": {"judged": done, "pending": total - done, "total": total},
        }


class JudgmentBody(BaseModel):
    reviewer: str
    item_id: str
    verdicts: dict[str, str]


_FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>dencap review</title></head>
<body>
<h1>dencap review service</h1>
<p>No review UI build found. API endpoints:</p>
<ul>
<li>GET /api/task?reviewer=&lt;id&gt;</li>
<li>POST /api/judgment</li>
<li>GET /api/export</li>
<li>GET /api/image/&lt;item_id&gt;</li>
<li>GET /api/progress</li>
</ul>
<p>Build the frontend and pass --static-dir to serve it here.</p>
</body></html>
"""


def create_app(store: ReviewStore, static_dir: Path | str | None = None) -> FastAPI:
    app = FastAPI(title="dencap review service")

    @app.get("/api/task")
    def get_task(reviewer: str = Query(default="")):
        if not reviewer:
            raise HTTPException(status_code=401, detail="unknown-reviewer")
        task = store.next_task(reviewer)
        progress = store.progress(reviewer)
        return {"task": task.to_json_obj() if task else None, "progress": progress}

    @app.post("/api/judgment")
    def post_judgment(body: JudgmentBody):
        if not body.reviewer:
            raise HTTPException(status_code=401, detail="unknown-reviewer")
        try:
            judgment = store.submit_judgment(body.reviewer, body.item_id, body.verdicts)
        except ReviewServiceError as exc:
            status = 404 if str(exc).startswith("unknown-item") else 400
            raise HTTPException(status_code=status, detail=str(exc)) from exc
        return {"status": "ok", "timestamp": judgment.timestamp}

    @app.get("/api/export")
    def export():
        return PlainTextResponse(store.export_jsonl(), media_type="application/x-ndjson")

    @app.get("/api/image/{item_id}")
    def image(item_id: str):
        path = store.image_paths.get(item_id)
        if path is None or not Path(path).is_file():
            raise HTTPException(status_code=404, detail=f"no-image:{item_id}")
        media_type = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
        return FileResponse(path, media_type=media_type)

    @app.get("/api/progress")
    def progress(reviewer: str = Query(default="")):
        return store.progress(reviewer or None)

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index():
            return _FALLBACK_PAGE

    return app


def serve(store: ReviewStore, host: str = "127.0.0.1", port: int = 8017, static_dir: Path | None = None) -> None:
    import uvicorn

    app = create_app(store, static_dir)
    logger.info("review service on http://%s:%d/ (%d tasks)", host, port, len(store.tasks))
    uvicorn.run(app, host=host, port=port, log_level="warning")
