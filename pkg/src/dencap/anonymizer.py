"""Copy images under generic names so no clinical filename text reaches the VLM."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING

from PIL import Image

from .catalog import Catalog

if TYPE_CHECKING:
    from .vlm_client import RequestLog

logger = logging.getLogger(__name__)

MAPPING_FILENAME = "mapping.json"
MIN_LEAK_BASENAME_LEN = 4

# EXIF tags that carry free text a model could read via metadata parsing.
_EXIF_TEXT_TAGS = {270: "ImageDescription", 315: "Artist", 305: "Software", 37510: "UserComment"}


class AnonymizerError(ValueError):
    pass


@dataclass
class AnonMapping:
    """Bijection between original paths and img_NNNN working names."""

    entries: list[tuple[Path, str]]
    created_at: datetime

    def resolve(self, anon_name: str) -> Path:
        for original, anon in self.entries:
            if anon == anon_name:
                return original
        raise AnonymizerError(f"unmapped:{anon_name}")

    def original_basenames(self) -> list[str]:
        """Original file basenames with extensions stripped (leak scan terms)."""
        return [original.stem for original, _ in self.entries]

    def save(self, path: Path) -> None:
        payload = [{"original": str(original), "anon": anon} for original, anon in self.entries]
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "AnonMapping":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = [(Path(item["original"]), item["anon"]) for item in payload]
        return cls(entries=entries, created_at=datetime.now(timezone.utc))


def pad_width(count: int) -> int:
    """Zero-pad width for anon indices: at least 4 digits, more when needed."""
    return max(4, len(str(count)))


def anon_name(index: int, pad: int, suffix: str) -> str:
    return f"img_{index:0{pad}d}{suffix}"


def _warn_on_exif_text(path: Path) -> None:
    try:
        with Image.open(path) as img:
            exif = img.getexif()
    except Exception:
        return
    for tag, name in _EXIF_TEXT_TAGS.items():
        value = exif.get(tag)
        if value and str(value).strip():
            logger.warning("EXIF text field %s present in %s (bytes left unmodified)", name, path)


def anonymize(catalog: Catalog, work_dir: Path | str) -> AnonMapping:
    """Copy every non-excluded image into work_dir as img_<index><ext>.

    Indices are contiguous from 1 in catalog order; pad width is max(4, digits
    needed for the count). Copies are byte-identical; the mapping is persisted
    to work_dir/mapping.json. Refuses to run over a dirty work_dir.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    mapping_path = work_dir / MAPPING_FILENAME
    if mapping_path.exists():
        raise AnonymizerError("workdir-not-clean")

    active = catalog.active()
    if not active:
        raise AnonymizerError("catalog has no non-excluded records")

    pad = pad_width(len(active))
    entries: list[tuple[Path, str]] = []
    for index, record in enumerate(active, start=1):
        name = anon_name(index, pad, record.source_path.suffix)
        try:
            shutil.copyfile(record.source_path, work_dir / name)
        except OSError as exc:
            raise AnonymizerError(f"copy failed for {record.source_path}: {exc}") from exc
        _warn_on_exif_text(record.source_path)
        entries.append((record.source_path, name))

    mapping = AnonMapping(entries=entries, created_at=datetime.now(timezone.utc))
    mapping.save(mapping_path)
    logger.info("anonymized %d images into %s", len(entries), work_dir)
    return mapping


def anonymized_catalog(catalog: Catalog, mapping: AnonMapping, work_dir: Path | str) -> Catalog:
    """Re-point non-excluded records at their anonymized copies."""
    work_dir = Path(work_dir)
    by_original = {original: anon for original, anon in mapping.entries}
    records = []
    for record in catalog.records:
        if record.excluded:
            records.append(record)
            continue
        anon = by_original[record.source_path]
        records.append(replace(record, source_path=work_dir / anon))
    return Catalog(records=records, provenance=catalog.provenance)


def resolve(mapping: AnonMapping, anon_name: str) -> Path:
    """Return the unique original path behind an anonymized name."""
    return mapping.resolve(anon_name)


@dataclass
class LeakFinding:
    request_id: str
    attempt: int
    substring: str


@dataclass
class LeakReport:
    findings: list[LeakFinding] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.findings


def verify_no_leakage(request_log: "RequestLog", mapping: AnonMapping) -> LeakReport:
    """Scan captured request text for any original basename of length >= 4.

    Matching is a case-insensitive substring check against extension-stripped
    basenames; the threshold suppresses trivially short names (so the anon
    prefix "img" never fires) while catching terms like "caries_tooth32".
    """
    terms = sorted({b.lower() for b in mapping.original_basenames() if len(b) >= MIN_LEAK_BASENAME_LEN})
    report = LeakReport()
    for entry in request_log.entries:
        haystack = f"{entry.anon_image_name}\n{entry.prompt_text}".lower()
        for term in terms:
            if term in haystack:
                report.findings.append(LeakFinding(entry.item_id, entry.attempt, term))
    return report
