"""Pluggable vision-language backend client: bounded retry, concurrency, request log."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .catalog import Catalog, ImageRecord
from .prompting import PromptTemplate, render_prompt

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base for backend failures."""


class RetryableBackendError(BackendError):
    """Transport problems, HTTP 429 and 5xx: worth another attempt."""


class NonRetryableBackendError(BackendError):
    """Malformed requests, auth rejections (4xx except 429): abort immediately."""


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retry with exponential backoff and jitter. Total attempts per
    item never exceed 1 + max_retries."""

    max_retries: int = 5
    base_delay: float = 1.0
    backoff_factor: float = 2.0
    jitter_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_factor < 1.0:
            raise ValueError("backoff_factor must be >= 1")
        if not 0.0 <= self.jitter_fraction < 1.0:
            raise ValueError("jitter_fraction must be in [0, 1)")

    def delay_for(self, attempt: int, rng: random.Random | None = None) -> float:
        """Delay after the given (1-based) failed attempt."""
        delay = self.base_delay * self.backoff_factor ** (attempt - 1)
        if self.jitter_fraction:
            u = (rng.random() if rng else random.random()) * 2.0 - 1.0
            delay *= 1.0 + self.jitter_fraction * u
        return max(delay, 0.0)


@dataclass
class BackendSpec:
    """Declarative backend choice; secrets stay behind an env-var name."""

    kind: str = "mock"
    endpoint: str = ""
    model_id: str = ""
    auth_env: str = ""
    timeout: float = 60.0
    fixtures_path: Path | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind: {self.kind}")
        if self.kind == "http" and (not self.endpoint or not self.model_id):
            raise ValueError("http backend requires endpoint and model_id")

    def build(self) -> "Backend":
        if self.kind == "mock":
            fixtures = load_fixture_table(self.fixtures_path) if self.fixtures_path else {}
            return MockBackend(fixtures)
        return HttpBackend(self)


@dataclass
class RawResponse:
    item_id: str
    attempt_count: int
    status: str  # "ok" | "failed"
    body_text: str
    latency: float
    error_chain: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class RequestLogEntry:
    item_id: str
    anon_image_name: str
    prompt_text: str
    timestamp: str
    attempt: int
    outcome: str


class RequestLog:
    """Append-only attempt ledger; safe for concurrent writers."""

    def __init__(self) -> None:
        self._entries: list[RequestLogEntry] = []
        self._lock = threading.Lock()

    @property
    def entries(self) -> list[RequestLogEntry]:
        with self._lock:
            return list(self._entries)

    def append(self, entry: RequestLogEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def save_jsonl(self, path: Path | str, append: bool = True) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        with path.open(mode, encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "item_id": e.item_id,
                            "anon_image_name": e.anon_image_name,
                            "prompt_text": e.prompt_text,
                            "timestamp": e.timestamp,
                            "attempt": e.attempt,
                            "outcome": e.outcome,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    @classmethod
    def load_jsonl(cls, path: Path | str) -> "RequestLog":
        log = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                log.append(
                    RequestLogEntry(
                        item_id=obj["item_id"],
                        anon_image_name=obj["anon_image_name"],
                        prompt_text=obj["prompt_text"],
                        timestamp=obj["timestamp"],
                        attempt=int(obj["attempt"]),
                        outcome=obj["outcome"],
                    )
                )
        return log


class Backend(Protocol):
    def complete(self, image_path: Path, prompt: str) -> str:
        """Return the backend's text for one (image, prompt) pair; raises BackendError."""
        ...


TOOTH_CYCLE = ["incisor", "canine", "premolar", "molar"]
SURFACE_CYCLE = ["buccal", "occlusal", "anterior", "lingual"]
CONDITION_CYCLE = [
    ["healthy"],
    ["caries"],
    ["staining"],
    ["caries", "discoloration"],
    ["enamel wear"],
    ["demineralization"],
]


def mock_respond(image_bytes: bytes, prompt: str, fixtures: dict[str, str]) -> str:
    """Deterministic stand-in for a live VLM.

    A fixture entry for the image's content hash is returned verbatim;
    otherwise a schema-valid JSON answer is derived from the hash alone,
    so identical bytes always produce identical responses.
    """
    digest = hashlib.sha256(image_bytes).hexdigest()
    if digest in fixtures:
        return fixtures[digest]
    h = int(digest, 16)
    quality = "good" if h % 2 == 0 else "bad"
    tooth = TOOTH_CYCLE[(h >> 1) % 4]
    surface = SURFACE_CYCLE[(h >> 3) % 4]
    conditions = CONDITION_CYCLE[(h >> 5) % 6]
    tooth_number = f"{(h >> 8) % 4 + 1}{(h >> 10) % 8 + 1}"
    if quality == "good":
        short = f"A {tooth} tooth seen from the {surface} surface."
        long = (
            f"The image shows a single {tooth} from the {surface} view. "
            f"Findings: {', '.join(conditions)}. Crown morphology is consistent with a {tooth}."
        )
    else:
        short = "The image is too blurry for a reliable assessment."
        long = "Image quality is poor; the tooth cannot be assessed with confidence."
    payload = {
        "quality": quality,
        "tooth_type": tooth,
        "surface": surface,
        "tooth_number": tooth_number,
        "conditions": conditions,
        "short_caption": short,
        "long_caption": long,
    }
    return json.dumps(payload, ensure_ascii=False)


def load_fixture_table(path: Path | str) -> dict[str, str]:
    """Fixture table: JSON map from lowercase hex content hash to response text."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(k).lower(): str(v) for k, v in obj.items()}


class MockBackend:
    def __init__(self, fixtures: dict[str, str] | None = None) -> None:
        self.fixtures = fixtures or {}

    def complete(self, image_path: Path, prompt: str) -> str:
        return mock_respond(Path(image_path).read_bytes(), prompt, self.fixtures)


_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


class HttpBackend:
    """OpenAI-compatible chat-completions client over httpx."""

    def __init__(self, spec: BackendSpec, transport: httpx.BaseTransport | None = None) -> None:
        self.spec = spec
        self._client = httpx.Client(timeout=spec.timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.spec.auth_env:
            import os

            token = os.environ.get(self.spec.auth_env, "")
            if not token:
                raise NonRetryableBackendError(f"auth token env var {self.spec.auth_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, image_path: Path, prompt: str) -> str:
        image_path = Path(image_path)
        media_type = _MEDIA_TYPES.get(image_path.suffix.lower(), "image/jpeg")
        encoded = base64.b64encode(image_path.read_bytes()).decode("ascii")
        body = {
            "model": self.spec.model_id,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": f"data:{media_type};base64,{encoded}"}},
                    ],
                }
            ],
        }
        try:
            response = self._client.post(self.spec.endpoint, json=body, headers=self._headers())
        except httpx.TransportError as exc:
            raise RetryableBackendError(f"transport error: {exc}") from exc

        if response.status_code == 429 or response.status_code >= 500:
            raise RetryableBackendError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise NonRetryableBackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise RetryableBackendError(f"malformed completion payload: {exc}") from exc
        if not content:
            raise RetryableBackendError("empty completion content")
        return str(content)


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def caption_one(
    backend: Backend,
    image_path: Path | str,
    prompt: str,
    policy: RetryPolicy,
    item_id: str = "",
    log: RequestLog | None = None,
    sleep_fn: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> RawResponse:
    """Send one (image, prompt) pair, retrying per policy.

    Retryable failures back off exponentially with jitter; non-retryable
    failures abort without consuming remaining retries. The outcome of every
    attempt is appended to the request log.
    """
    image_path = Path(image_path)
    if not prompt:
        raise ValueError("empty prompt")
    item_id = item_id or image_path.stem
    errors: list[str] = []
    started = time.perf_counter()
    max_attempts = 1 + policy.max_retries

    for attempt in range(1, max_attempts + 1):
        outcome = "ok"
        try:
            body = backend.complete(image_path, prompt)
            if not body:
                raise RetryableBackendError("empty-response")
        except NonRetryableBackendError as exc:
            errors.append(str(exc))
            outcome = f"error:{exc}"
            _log_attempt(log, item_id, image_path, prompt, attempt, outcome)
            return RawResponse(item_id, attempt, "failed", "", time.perf_counter() - started, errors)
        except BackendError as exc:
            errors.append(str(exc))
            outcome = f"error:{exc}"
        except Exception as exc:  # unexpected transport-level trouble: retry it
            errors.append(f"{type(exc).__name__}: {exc}")
            outcome = f"error:{exc}"
        else:
            _log_attempt(log, item_id, image_path, prompt, attempt, outcome)
            return RawResponse(item_id, attempt, "ok", body, time.perf_counter() - started)

        _log_attempt(log, item_id, image_path, prompt, attempt, outcome)
        if attempt < max_attempts:
            sleep_fn(policy.delay_for(attempt, rng))

    return RawResponse(item_id, max_attempts, "failed", "", time.perf_counter() - started, errors)


def _log_attempt(
    log: RequestLog | None, item_id: str, image_path: Path, prompt: str, attempt: int, outcome: str
) -> None:
    if log is None:
        return
    log.append(
        RequestLogEntry(
            item_id=item_id,
            anon_image_name=image_path.name,
            prompt_text=prompt,
            timestamp=_now_iso(),
            attempt=attempt,
            outcome=outcome,
        )
    )


@dataclass
class BatchReport:
    total: int
    ok: int
    failed: int
    wall_time_s: float


def _context_for(record: ImageRecord, template: PromptTemplate) -> dict[str, str]:
    available = {"view": record.view.value, "dataset_id": record.dataset_id}
    return {slot: available[slot] for slot in template.body_slots() if slot in available}


def caption_batch(
    backend: Backend,
    items: Catalog,
    template: PromptTemplate,
    policy: RetryPolicy,
    concurrency: int = 4,
    log: RequestLog | None = None,
    sleep_fn: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> tuple[list[RawResponse], BatchReport]:
    """Caption every non-excluded catalog item, at most `concurrency` in flight.

    Responses come back in catalog order regardless of completion order;
    per-item failures are data, not exceptions.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    active = items.active()
    started = time.perf_counter()

    def work(record: ImageRecord) -> RawResponse:
        prompt = render_prompt(template, _context_for(record, template))
        return caption_one(
            backend,
            record.source_path,
            prompt,
            policy,
            item_id=record.id,
            log=log,
            sleep_fn=sleep_fn,
            rng=rng,
        )

    if concurrency == 1 or len(active) <= 1:
        responses = [work(r) for r in active]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            responses = list(pool.map(work, active))

    ok = sum(1 for r in responses if r.ok)
    report = BatchReport(
        total=len(responses),
        ok=ok,
        failed=len(responses) - ok,
        wall_time_s=time.perf_counter() - started,
    )
    logger.info("caption batch: %d ok, %d failed in %.2fs", report.ok, report.failed, report.wall_time_s)
    return responses, report


def save_responses(responses: list[RawResponse], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in responses:
            fh.write(
                json.dumps(
                    {
                        "item_id": r.item_id,
                        "status": r.status,
                        "attempts": r.attempt_count,
                        "body": r.body_text,
                        "latency_ms": int(round(r.latency * 1000)),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_responses(path: Path | str) -> list[RawResponse]:
    responses: list[RawResponse] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            responses.append(
                RawResponse(
                    item_id=obj["item_id"],
                    attempt_count=int(obj["attempts"]),
                    status=obj["status"],
                    body_text=obj.get("body", ""),
                    latency=float(obj.get("latency_ms", 0)) / 1000.0,
                )
            )
    return responses
