"""Image corpus model: manifest ingestion, view/label records, count tables."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ["id", "path", "dataset_id", "view", "tooth_type", "surface", "width", "height"]


class CatalogError(ValueError):
    """Fatal ingestion problem (missing manifest, duplicate id, bad schema)."""


class ViewCategory(str, Enum):
    ANTERIOR = "anterior"
    BUCCAL = "buccal"
    OCCLUSAL = "occlusal"
    LINGUAL = "lingual"

    @property
    def supported_for_evaluation(self) -> bool:
        # The source corpora carry no lingual images; lingual stays representable
        # but is skipped by surface-accuracy metrics.
        return self is not ViewCategory.LINGUAL


class ToothType(str, Enum):
    INCISOR = "incisor"
    CANINE = "canine"
    PREMOLAR = "premolar"
    MOLAR = "molar"
    UNKNOWN = "unknown"


TOOTH_TYPE_ALIASES = {
    "incisor": ToothType.INCISOR,
    "central incisor": ToothType.INCISOR,
    "lateral incisor": ToothType.INCISOR,
    "central_incisor": ToothType.INCISOR,
    "lateral_incisor": ToothType.INCISOR,
    "canine": ToothType.CANINE,
    "cuspid": ToothType.CANINE,
    "premolar": ToothType.PREMOLAR,
    "bicuspid": ToothType.PREMOLAR,
    "molar": ToothType.MOLAR,
    "unknown": ToothType.UNKNOWN,
}


def parse_tooth_type(text: str) -> ToothType | None:
    """Map a label to its ToothType; central/lateral incisors collapse to incisor."""
    return TOOTH_TYPE_ALIASES.get(text.strip().lower())


def parse_view(text: str) -> ViewCategory | None:
    try:
        return ViewCategory(text.strip().lower())
    except ValueError:
        return None


@dataclass
class ImageRecord:
    """One source or cropped image with its provenance and ground truth."""

    id: str
    source_path: Path
    dataset_id: str
    view: ViewCategory
    truth_tooth_type: ToothType | None = None
    truth_surface: ViewCategory | None = None
    width_px: int = 0
    height_px: int = 0
    excluded: bool = False
    exclude_reason: str | None = None

    def exclude(self, reason: str) -> "ImageRecord":
        return replace(self, excluded=True, exclude_reason=reason)

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "path": str(self.source_path),
            "dataset_id": self.dataset_id,
            "view": self.view.value,
            "tooth_type": self.truth_tooth_type.value if self.truth_tooth_type else None,
            "surface": self.truth_surface.value if self.truth_surface else None,
            "width": self.width_px,
            "height": self.height_px,
            "excluded": self.excluded,
            "exclude_reason": self.exclude_reason,
        }


@dataclass
class Provenance:
    manifest_path: Path
    ingested_at: datetime


@dataclass
class Catalog:
    """Ordered, immutable-by-convention collection of ImageRecords."""

    records: list[ImageRecord]
    provenance: Provenance

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def active(self) -> list[ImageRecord]:
        """Records that flow downstream (everything not excluded)."""
        return [r for r in self.records if not r.excluded]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def save_jsonl(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json_obj(), ensure_ascii=False) + "\n")


def _record_from_row(row: dict, row_no: int, manifest_dir: Path, default_dataset: str | None) -> ImageRecord:
    """Build one record from a manifest row, downgrading label problems to exclusions."""
    rec_id = (row.get("id") or "").strip()
    if not rec_id:
        raise CatalogError(f"manifest row {row_no}: empty id")

    raw_path = (row.get("path") or "").strip()
    source_path = Path(raw_path)
    if not source_path.is_absolute():
        source_path = manifest_dir / source_path

    dataset_id = (row.get("dataset_id") or "").strip() or (default_dataset or "")
    if not dataset_id:
        raise CatalogError(f"manifest row {row_no} ({rec_id}): no dataset_id in row or argument")

    raw_view = (row.get("view") or "").strip()
    view = parse_view(raw_view)

    truth_type: ToothType | None = None
    raw_type = (row.get("tooth_type") or "").strip()
    bad_type = False
    if raw_type:
        truth_type = parse_tooth_type(raw_type)
        bad_type = truth_type is None

    truth_surface: ViewCategory | None = None
    raw_surface = (row.get("surface") or "").strip()
    bad_surface = False
    if raw_surface:
        truth_surface = parse_view(raw_surface)
        bad_surface = truth_surface is None

    try:
        width = int(row.get("width") or 0)
        height = int(row.get("height") or 0)
    except (TypeError, ValueError):
        width = height = -1

    record = ImageRecord(
        id=rec_id,
        source_path=source_path,
        dataset_id=dataset_id,
        view=view or ViewCategory.ANTERIOR,
        truth_tooth_type=truth_type,
        truth_surface=truth_surface,
        width_px=max(width, 0),
        height_px=max(height, 0),
    )

    if view is None:
        return record.exclude(f"bad-view:{raw_view}")
    if bad_type:
        return record.exclude(f"bad-tooth-type:{raw_type}")
    if bad_surface:
        return record.exclude(f"bad-surface:{raw_surface}")
    if width <= 0 or height <= 0:
        return record.exclude(f"bad-dims:{row.get('width')}x{row.get('height')}")
    if not source_path.is_file():
        return record.exclude("missing-file")
    return record


def _iter_manifest_rows(manifest_path: Path) -> Iterator[dict]:
    if manifest_path.suffix.lower() in {".jsonl", ".json"}:
        with manifest_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
        return
    with manifest_path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise CatalogError(f"manifest {manifest_path} missing columns: {sorted(missing)}")
        yield from reader


def ingest_manifest(manifest_path: Path | str, dataset_id: str | None = None) -> Catalog:
    """Read a CSV or JSONL manifest into a Catalog.

    Rows with malformed labels or missing image files are kept but marked
    excluded with a machine-readable reason, so the filtering funnel stays
    auditable. Duplicate ids and a missing manifest are fatal. `dataset_id`
    fills rows whose own dataset_id column is empty.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CatalogError(f"manifest not found: {manifest_path}")

    records: list[ImageRecord] = []
    seen: set[str] = set()
    for row_no, row in enumerate(_iter_manifest_rows(manifest_path), start=1):
        record = _record_from_row(row, row_no, manifest_path.parent, dataset_id)
        if record.id in seen:
            raise CatalogError(f"duplicate id in manifest: {record.id}")
        seen.add(record.id)
        records.append(record)

    excluded = sum(1 for r in records if r.excluded)
    logger.info("ingested %s: %d records (%d excluded)", manifest_path, len(records), excluded)
    return Catalog(records=records, provenance=Provenance(manifest_path, datetime.now(timezone.utc)))


def merge_catalogs(catalogs: Sequence[Catalog]) -> Catalog:
    """Concatenate catalogs, enforcing id uniqueness across all of them."""
    records: list[ImageRecord] = []
    seen: set[str] = set()
    for catalog in catalogs:
        for record in catalog.records:
            if record.id in seen:
                raise CatalogError(f"duplicate id across manifests: {record.id}")
            seen.add(record.id)
            records.append(record)
    provenance = catalogs[0].provenance if catalogs else Provenance(Path("."), datetime.now(timezone.utc))
    return Catalog(records=records, provenance=provenance)


def load_catalog_jsonl(path: Path | str) -> Catalog:
    """Load a previously saved catalog artifact (trusted, no re-validation)."""
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"catalog not found: {path}")
    records: list[ImageRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                ImageRecord(
                    id=obj["id"],
                    source_path=Path(obj["path"]),
                    dataset_id=obj["dataset_id"],
                    view=ViewCategory(obj["view"]),
                    truth_tooth_type=ToothType(obj["tooth_type"]) if obj.get("tooth_type") else None,
                    truth_surface=ViewCategory(obj["surface"]) if obj.get("surface") else None,
                    width_px=int(obj.get("width") or 0),
                    height_px=int(obj.get("height") or 0),
                    excluded=bool(obj.get("excluded", False)),
                    exclude_reason=obj.get("exclude_reason"),
                )
            )
    return Catalog(records=records, provenance=Provenance(path, datetime.now(timezone.utc)))


def filter_views(catalog: Catalog, allowed: Iterable[ViewCategory]) -> Catalog:
    """Keep only records whose view is in `allowed`, preserving order."""
    allowed = frozenset(allowed)
    if not allowed:
        raise CatalogError("empty-view-filter")
    kept = [r for r in catalog.records if r.view in allowed]
    return Catalog(records=kept, provenance=catalog.provenance)


COUNT_COLUMNS = [ToothType.INCISOR, ToothType.CANINE, ToothType.PREMOLAR, ToothType.MOLAR]


@dataclass
class CountsRow:
    dataset_id: str
    by_type: dict[ToothType, int]
    untyped: int

    @property
    def total(self) -> int:
        return sum(self.by_type.values()) + self.untyped


@dataclass
class CountsTable:
    """Per-dataset tooth-type counts; totals include untyped records."""

    rows: list[CountsRow] = field(default_factory=list)

    def row(self, dataset_id: str) -> CountsRow | None:
        for row in self.rows:
            if row.dataset_id == dataset_id:
                return row
        return None

    def render_csv(self) -> str:
        lines = ["dataset_id,incisor,canine,premolar,molar,total"]
        for row in self.rows:
            cells = [str(row.by_type.get(t, 0)) for t in COUNT_COLUMNS]
            lines.append(f"{row.dataset_id},{','.join(cells)},{row.total}")
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        header = ["dataset_id", "incisor", "canine", "premolar", "molar", "total"]
        table = [header]
        for row in self.rows:
            table.append(
                [row.dataset_id]
                + [str(row.by_type.get(t, 0)) for t in COUNT_COLUMNS]
                + [str(row.total)]
            )
        widths = [max(len(line[i]) for line in table) for i in range(len(header))]
        rendered = []
        for line in table:
            cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]
            rendered.append("  ".join(cells).rstrip())
        return "\n".join(rendered) + "\n"


def summarize(catalog: Catalog) -> CountsTable:
    """Count non-excluded records per dataset and tooth type.

    Records without a truth tooth type count toward the row total only,
    mirroring source datasets that ship unannotated (their per-type cells
    stay empty while the total reflects every usable image).
    """
    buckets: dict[str, CountsRow] = {}
    for record in catalog.records:
        if record.excluded:
            continue
        row = buckets.get(record.dataset_id)
        if row is None:
            row = CountsRow(dataset_id=record.dataset_id, by_type={}, untyped=0)
            buckets[record.dataset_id] = row
        tooth = record.truth_tooth_type
        if tooth is None or tooth is ToothType.UNKNOWN:
            row.untyped += 1
        else:
            row.by_type[tooth] = row.by_type.get(tooth, 0) + 1
    return CountsTable(rows=[buckets[k] for k in sorted(buckets)])
