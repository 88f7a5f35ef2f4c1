"""Detection boxes to single-tooth crop files, with view-dependent gum padding."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .catalog import Catalog, ImageRecord, ToothType, ViewCategory, parse_tooth_type

logger = logging.getLogger(__name__)

JPEG_QUALITY = 95


class CropperError(ValueError):
    pass


@dataclass
class DetectionBox:
    """One tooth detection on a parent image; corners in pixels, x0<x1, y0<y1."""

    image_id: str
    x0: int
    y0: int
    x1: int
    y1: int
    predicted_tooth_type: ToothType | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise CropperError(
                f"degenerate box for {self.image_id}: ({self.x0},{self.y0},{self.x1},{self.y1})"
            )
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise CropperError(f"score out of range for {self.image_id}: {self.score}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass
class PaddingRule:
    """Per-view crop padding in pixels. Buccal/anterior views get 60 extra pixels
    on each side so the gum region stays in frame; occlusal views get none
    (gums are hidden from above)."""

    per_view: dict[ViewCategory, int] = field(
        default_factory=lambda: {
            ViewCategory.ANTERIOR: 60,
            ViewCategory.BUCCAL: 60,
            ViewCategory.OCCLUSAL: 0,
            ViewCategory.LINGUAL: 0,
        }
    )

    def __post_init__(self) -> None:
        for view, pad in self.per_view.items():
            if pad < 0:
                raise CropperError(f"negative padding for {view.value}: {pad}")

    def for_view(self, view: ViewCategory) -> int:
        return self.per_view.get(view, 0)


def expand_box(
    box: DetectionBox, view: ViewCategory, image_w: int, image_h: int, rule: PaddingRule
) -> DetectionBox:
    """Pad every side by the view's padding, then clamp to the image bounds."""
    if image_w <= 0 or image_h <= 0:
        raise CropperError(f"bad image dims {image_w}x{image_h}")
    if box.x0 >= image_w or box.x1 <= 0 or box.y0 >= image_h or box.y1 <= 0:
        raise CropperError("box-out-of-bounds")
    pad = rule.for_view(view)
    return DetectionBox(
        image_id=box.image_id,
        x0=max(box.x0 - pad, 0),
        y0=max(box.y0 - pad, 0),
        x1=min(box.x1 + pad, image_w),
        y1=min(box.y1 + pad, image_h),
        predicted_tooth_type=box.predicted_tooth_type,
        score=box.score,
    )


@dataclass
class CropRecord(ImageRecord):
    """ImageRecord for a crop, linked back to its parent image and box."""

    parent_id: str = ""
    box: DetectionBox | None = None

    def to_json_obj(self) -> dict:
        obj = super().to_json_obj()
        obj["parent_id"] = self.parent_id
        if self.box is not None:
            obj["box"] = [self.box.x0, self.box.y0, self.box.x1, self.box.y1]
        return obj


def _crop_suffix(parent_suffix: str) -> str:
    suffix = parent_suffix.lower()
    if suffix == ".png":
        return parent_suffix
    if suffix in {".jpg", ".jpeg"}:
        return parent_suffix
    return ".jpg"


def crop_tooth(
    image_path: Path | str, box: DetectionBox, out_path: Path | str, parent: ImageRecord
) -> CropRecord:
    """Write the box region of the parent image to out_path.

    The crop is exactly box.width x box.height pixels. PNG sources stay PNG;
    everything else is re-encoded as JPEG quality 95 (enough to keep caries
    and stain texture). Undecodable sources yield an excluded record rather
    than aborting the batch.
    """
    image_path = Path(image_path)
    out_path = Path(out_path)
    record = CropRecord(
        id=out_path.stem,
        source_path=out_path,
        dataset_id=parent.dataset_id,
        view=parent.view,
        truth_tooth_type=box.predicted_tooth_type or parent.truth_tooth_type,
        truth_surface=parent.truth_surface,
        width_px=box.width,
        height_px=box.height,
        parent_id=parent.id,
        box=box,
    )
    try:
        with Image.open(image_path) as img:
            crop = img.crop((box.x0, box.y0, box.x1, box.y1))
            out_path.parent.mkdir(parents=True, exist_ok=True)
            if out_path.suffix.lower() == ".png":
                crop.save(out_path, format="PNG")
            else:
                if crop.mode not in ("RGB", "L"):
                    crop = crop.convert("RGB")
                crop.save(out_path, format="JPEG", quality=JPEG_QUALITY)
    except (UnidentifiedImageError, OSError) as exc:
        logger.warning("crop failed for %s: %s", image_path, exc)
        return record.exclude("decode-failure")
    return record


def crop_batch(
    catalog: Catalog,
    detections: list[DetectionBox],
    rule: PaddingRule,
    out_dir: Path | str,
    workers: int = 1,
) -> Catalog:
    """Crop every detection against its parent record, in detection order.

    Crops inherit dataset, view and truth labels from the parent; a per-box
    tooth type overrides the parent label. Detections referencing unknown (or
    excluded) parents become excluded records instead of failing the batch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parents = {r.id: r for r in catalog.active()}

    per_parent_index: dict[str, int] = {}
    prepared: list[CropRecord | tuple[Path, DetectionBox, Path, ImageRecord]] = []
    seen_ids: set[str] = set()
    for det in detections:
        parent = parents.get(det.image_id)
        if parent is None:
            prepared.append(_failed_crop(det, "unknown-parent"))
            continue
        k = per_parent_index.get(parent.id, 0) + 1
        per_parent_index[parent.id] = k
        out_name = f"{parent.source_path.stem}_t{k}{_crop_suffix(parent.source_path.suffix)}"
        out_path = out_dir / out_name
        if out_path.stem in seen_ids:
            raise CropperError(f"crop id collision: {out_path.stem}")
        seen_ids.add(out_path.stem)
        try:
            clamped = _clamp(det, parent.width_px, parent.height_px)
            expanded = expand_box(clamped, parent.view, parent.width_px, parent.height_px, rule)
        except CropperError:
            prepared.append(_failed_crop(det, "box-out-of-bounds", parent))
            continue
        prepared.append((parent.source_path, expanded, out_path, parent))

    def run(task):
        if isinstance(task, CropRecord):
            return task
        return crop_tooth(*task)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, prepared))
    else:
        records = [run(task) for task in prepared]

    excluded = sum(1 for r in records if r.excluded)
    logger.info("cropped %d detections into %s (%d excluded)", len(records), out_dir, excluded)
    return Catalog(records=list(records), provenance=catalog.provenance)


def _clamp(det: DetectionBox, image_w: int, image_h: int) -> DetectionBox:
    x0 = min(max(det.x0, 0), image_w)
    x1 = min(max(det.x1, 0), image_w)
    y0 = min(max(det.y0, 0), image_h)
    y1 = min(max(det.y1, 0), image_h)
    if x0 >= x1 or y0 >= y1:
        raise CropperError("box-out-of-bounds")
    return DetectionBox(det.image_id, x0, y0, x1, y1, det.predicted_tooth_type, det.score)


def _failed_crop(det: DetectionBox, reason: str, parent: ImageRecord | None = None) -> CropRecord:
    return CropRecord(
        id=f"{det.image_id}_failed_{det.x0}_{det.y0}",
        source_path=Path(""),
        dataset_id=parent.dataset_id if parent else "",
        view=parent.view if parent else ViewCategory.ANTERIOR,
        parent_id=det.image_id,
        box=det,
    ).exclude(reason)


def load_detections(path: Path | str) -> list[DetectionBox]:
    """Read detections JSONL: one {"image_id", "x0".."y1", "tooth_type", "score"} per line."""
    path = Path(path)
    if not path.is_file():
        raise CropperError(f"detections not found: {path}")
    boxes: list[DetectionBox] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                tooth = parse_tooth_type(obj["tooth_type"]) if obj.get("tooth_type") else None
                boxes.append(
                    DetectionBox(
                        image_id=obj["image_id"],
                        x0=int(obj["x0"]),
                        y0=int(obj["y0"]),
                        x1=int(obj["x1"]),
                        y1=int(obj["y1"]),
                        predicted_tooth_type=tooth,
                        score=obj.get("score"),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CropperError(f"{path}:{line_no}: bad detection line: {exc}") from exc
    return boxes
