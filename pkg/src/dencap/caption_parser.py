"""Raw backend text to typed caption records: JSON extraction, keyword ontology,
tooth-type inference from prose, condition extraction with negation, quality gate."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .catalog import ToothType, parse_tooth_type
from .vlm_client import RawResponse

logger = logging.getLogger(__name__)


class Quality(str, Enum):
    GOOD = "good"
    BAD = "bad"


class Surface(str, Enum):
    BUCCAL = "buccal"
    OCCLUSAL = "occlusal"
    ANTERIOR = "anterior"
    LINGUAL = "lingual"
    UNKNOWN = "unknown"


class ConditionKind(str, Enum):
    CARIES = "caries"
    STAINING = "staining"
    ENAMEL_LOSS = "enamel_loss"
    DISCOLORATION = "discoloration"
    DEMINERALIZATION = "demineralization"
    STRUCTURAL_DAMAGE = "structural_damage"
    HEALTHY = "healthy"
    OTHER = "other"


@dataclass(frozen=True)
class ConditionTag:
    kind: ConditionKind
    detail: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ConditionKind.OTHER and not self.detail:
            raise ValueError("other condition requires the verbatim phrase")

    def render(self) -> str:
        return self.detail if self.kind is ConditionKind.OTHER else self.kind.value


def other_condition(phrase: str) -> ConditionTag:
    return ConditionTag(ConditionKind.OTHER, phrase.strip())


CORE_CONDITIONS = (
    ConditionKind.CARIES,
    ConditionKind.STAINING,
    ConditionKind.ENAMEL_LOSS,
    ConditionKind.DISCOLORATION,
)


@dataclass(frozen=True)
class Ontology:
    """Case-insensitive keyword maps driving prose extraction.

    Tooth-type stop terms exist because the model's habit of calling front
    teeth "anterior" must count toward no type at all.
    """

    tooth_types: Mapping[str, ToothType]
    surfaces: Mapping[str, Surface]
    conditions: Mapping[str, ConditionKind]
    tooth_type_stop_terms: frozenset[str]
    negators: frozenset[str]


DEFAULT_ONTOLOGY = Ontology(
    tooth_types={
        "incisor": ToothType.INCISOR,
        "incisors": ToothType.INCISOR,
        "canine": ToothType.CANINE,
        "canines": ToothType.CANINE,
        "cuspid": ToothType.CANINE,
        "cuspids": ToothType.CANINE,
        "premolar": ToothType.PREMOLAR,
        "premolars": ToothType.PREMOLAR,
        "bicuspid": ToothType.PREMOLAR,
        "bicuspids": ToothType.PREMOLAR,
        "molar": ToothType.MOLAR,
        "molars": ToothType.MOLAR,
    },
    surfaces={
        "buccal": Surface.BUCCAL,
        "facial": Surface.BUCCAL,
        "occlusal": Surface.OCCLUSAL,
        "anterior": Surface.ANTERIOR,
        "labial": Surface.ANTERIOR,
        "lingual": Surface.LINGUAL,
    },
    conditions={
        "caries": ConditionKind.CARIES,
        "carious": ConditionKind.CARIES,
        "cavity": ConditionKind.CARIES,
        "cavities": ConditionKind.CARIES,
        "decay": ConditionKind.CARIES,
        "decayed": ConditionKind.CARIES,
        "staining": ConditionKind.STAINING,
        "stain": ConditionKind.STAINING,
        "stains": ConditionKind.STAINING,
        "stained": ConditionKind.STAINING,
        "enamel loss": ConditionKind.ENAMEL_LOSS,
        "enamel wear": ConditionKind.ENAMEL_LOSS,
        "worn enamel": ConditionKind.ENAMEL_LOSS,
        "enamel erosion": ConditionKind.ENAMEL_LOSS,
        "eroded enamel": ConditionKind.ENAMEL_LOSS,
        "loss of enamel": ConditionKind.ENAMEL_LOSS,
        "discoloration": ConditionKind.DISCOLORATION,
        "discolouration": ConditionKind.DISCOLORATION,
        "discolored": ConditionKind.DISCOLORATION,
        "discoloured": ConditionKind.DISCOLORATION,
        "demineralization": ConditionKind.DEMINERALIZATION,
        "demineralisation": ConditionKind.DEMINERALIZATION,
        "demineralized": ConditionKind.DEMINERALIZATION,
        "demineralised": ConditionKind.DEMINERALIZATION,
        "white spot": ConditionKind.DEMINERALIZATION,
        "structural damage": ConditionKind.STRUCTURAL_DAMAGE,
        "fracture": ConditionKind.STRUCTURAL_DAMAGE,
        "fractured": ConditionKind.STRUCTURAL_DAMAGE,
        "chipped": ConditionKind.STRUCTURAL_DAMAGE,
        "chip": ConditionKind.STRUCTURAL_DAMAGE,
        "cracked": ConditionKind.STRUCTURAL_DAMAGE,
        "crack": ConditionKind.STRUCTURAL_DAMAGE,
        "broken": ConditionKind.STRUCTURAL_DAMAGE,
        "healthy": ConditionKind.HEALTHY,
    },
    tooth_type_stop_terms=frozenset({"anterior", "posterior", "tooth", "teeth"}),
    negators=frozenset({"no", "not", "without", "none", "never", "neither", "nor", "non", "free", "absent"}),
)

NEGATION_WINDOW = 3


@dataclass
class CaptionRecord:
    item_id: str
    quality: Quality
    tooth_type: ToothType
    inferred_type: ToothType
    surface: Surface
    tooth_number: str | None
    conditions: set[ConditionTag]
    short_caption: str
    long_caption: str
    parse_warnings: list[str] = field(default_factory=list)
    dataset_id: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "item_id": self.item_id,
            "dataset_id": self.dataset_id,
            "quality": self.quality.value,
            "tooth_type": self.tooth_type.value,
            "inferred_type": self.inferred_type.value,
            "surface": self.surface.value,
            "tooth_number": self.tooth_number,
            "conditions": sorted(tag.render() for tag in self.conditions),
            "short_caption": self.short_caption,
            "long_caption": self.long_caption,
            "warnings": list(self.parse_warnings),
        }

    def to_response_json(self) -> str:
        """Render back into the backend response schema (round-trip support)."""
        return json.dumps(
            {
                "quality": self.quality.value,
                "tooth_type": self.tooth_type.value,
                "surface": self.surface.value,
                "tooth_number": self.tooth_number,
                "conditions": sorted(tag.render() for tag in self.conditions),
                "short_caption": self.short_caption,
                "long_caption": self.long_caption,
            },
            ensure_ascii=False,
        )


def _find_json_object(text: str) -> dict | None:
    """First top-level JSON object in the text, tolerating prose and code fences."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


_WORD = re.compile(r"[a-z0-9_']+")


def _tokenize(text: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start()) for m in _WORD.finditer(text.lower())]


def _keyword_pattern(phrase: str) -> re.Pattern[str]:
    escaped = re.escape(phrase.lower()).replace(r"\ ", r"\s+")
    return re.compile(rf"\b{escaped}\b")


def _scan_keywords(text: str, keywords: Iterable[str]) -> list[tuple[str, int]]:
    """All (keyword, match_start) hits over the lowercased text."""
    lowered = text.lower()
    hits: list[tuple[str, int]] = []
    for keyword in keywords:
        for match in _keyword_pattern(keyword).finditer(lowered):
            hits.append((keyword, match.start()))
    return hits


def _is_negated(text: str, match_start: int, negators: frozenset[str]) -> bool:
    """True when a negator sits within NEGATION_WINDOW tokens before the hit."""
    tokens = _tokenize(text)
    idx = 0
    for i, (_, start) in enumerate(tokens):
        if start > match_start:
            break
        idx = i
    window = tokens[max(0, idx - NEGATION_WINDOW) : idx]
    return any(tok in negators for tok, _ in window)


def infer_tooth_type(short_caption: str, long_caption: str, ontology: Ontology = DEFAULT_ONTOLOGY) -> ToothType:
    """Tooth type recovered from caption prose.

    Counts word-boundary keyword occurrences over both captions; the most
    frequent type wins, ties break toward the earliest first occurrence in
    the concatenated text. No matches at all (for example a caption that only
    says "anterior tooth") yields unknown.
    """
    text = f"{short_caption}\n{long_caption}"
    counts: dict[ToothType, int] = {}
    first_pos: dict[ToothType, int] = {}
    for keyword, start in _scan_keywords(text, ontology.tooth_types):
        if keyword in ontology.tooth_type_stop_terms:
            continue
        tooth = ontology.tooth_types[keyword]
        counts[tooth] = counts.get(tooth, 0) + 1
        if tooth not in first_pos or start < first_pos[tooth]:
            first_pos[tooth] = start
    if not counts:
        return ToothType.UNKNOWN
    return min(counts, key=lambda t: (-counts[t], first_pos[t]))


def _caption_condition_hits(text: str, ontology: Ontology) -> set[ConditionTag]:
    tags: set[ConditionTag] = set()
    for keyword, start in _scan_keywords(text, ontology.conditions):
        if _is_negated(text, start, ontology.negators):
            continue
        tags.add(ConditionTag(ontology.conditions[keyword]))
    return tags


def condition_from_name(phrase: str) -> ConditionTag | None:
    """Exact canonical kind name ("enamel_loss") to its tag, else None."""
    key = phrase.strip().lower()
    for kind in ConditionKind:
        if kind is not ConditionKind.OTHER and kind.value == key:
            return ConditionTag(kind)
    return None


def _canonicalize_structured(phrase: str, ontology: Ontology) -> set[ConditionTag]:
    """One structured condition phrase to tags: matched keywords canonicalize,
    negated phrases drop, anything unmatched passes through verbatim."""
    named = condition_from_name(phrase)
    if named is not None:
        return {named}
    hits = _scan_keywords(phrase, ontology.conditions)
    if not hits:
        cleaned = phrase.strip()
        return {other_condition(cleaned)} if cleaned else set()
    tags: set[ConditionTag] = set()
    for keyword, start in hits:
        if not _is_negated(phrase, start, ontology.negators):
            tags.add(ConditionTag(ontology.conditions[keyword]))
    return tags


def _drop_shadowed_healthy(tags: set[ConditionTag]) -> set[ConditionTag]:
    healthy = ConditionTag(ConditionKind.HEALTHY)
    if healthy in tags and len(tags) > 1:
        return tags - {healthy}
    return tags


def extract_conditions(
    short_caption: str,
    long_caption: str,
    structured_conditions: list[str],
    ontology: Ontology = DEFAULT_ONTOLOGY,
) -> set[ConditionTag]:
    """Union of canonicalized structured conditions and caption keyword hits.

    Negated mentions ("no caries", "without staining") are excluded; within
    each source, "healthy" never survives next to a disease tag.
    """
    structured: set[ConditionTag] = set()
    for phrase in structured_conditions:
        structured |= _canonicalize_structured(str(phrase), ontology)
    structured = _drop_shadowed_healthy(structured)

    from_captions = _drop_shadowed_healthy(
        _caption_condition_hits(f"{short_caption}\n{long_caption}", ontology)
    )
    return _drop_shadowed_healthy(structured | from_captions)


_QUALITY_COMPLAINTS = (
    "poor quality",
    "low quality",
    "blurry",
    "blurred",
    "out of focus",
    "too dark",
    "low resolution",
    "low-resolution",
    "unclear",
    "cannot be assessed",
)

_FDI_PATTERN = re.compile(r"^[1-8][1-8]$")


def parse_structured(raw: RawResponse, ontology: Ontology = DEFAULT_ONTOLOGY) -> CaptionRecord:
    """Parse one ok response into a CaptionRecord; never raises on content.

    Missing or invalid fields degrade with warnings: quality falls back to
    bad, tooth type and surface to unknown. A good-quality flag paired with
    empty captions is demoted to bad (good records must carry both captions);
    a good flag whose captions read like a quality complaint is surfaced as a
    warning but trusted, since overriding the model's own gate would hide the
    mismatch instead of reporting it.
    """
    if not raw.ok:
        raise ValueError(f"cannot parse failed response for {raw.item_id}")

    warnings: list[str] = []
    obj = _find_json_object(raw.body_text)
    if obj is None:
        return CaptionRecord(
            item_id=raw.item_id,
            quality=Quality.BAD,
            tooth_type=ToothType.UNKNOWN,
            inferred_type=ToothType.UNKNOWN,
            surface=Surface.UNKNOWN,
            tooth_number=None,
            conditions=set(),
            short_caption="",
            long_caption="",
            parse_warnings=["unparseable"],
        )

    raw_quality = obj.get("quality")
    if isinstance(raw_quality, str) and raw_quality.strip().lower() in ("good", "bad"):
        quality = Quality(raw_quality.strip().lower())
    else:
        quality = Quality.BAD
        warnings.append(f"bad-quality:{raw_quality!r}")

    raw_tooth = obj.get("tooth_type")
    tooth = parse_tooth_type(raw_tooth) if isinstance(raw_tooth, str) else None
    if tooth is None:
        tooth = ToothType.UNKNOWN
        if raw_tooth not in (None, ""):
            warnings.append(f"bad-tooth-type:{raw_tooth!r}")
        else:
            warnings.append("missing-tooth-type")

    raw_surface = obj.get("surface")
    surface = None
    if isinstance(raw_surface, str):
        key = raw_surface.strip().lower()
        if key == "unknown":
            surface = Surface.UNKNOWN
        else:
            surface = ontology.surfaces.get(key)
    if surface is None:
        surface = Surface.UNKNOWN
        if raw_surface not in (None, ""):
            warnings.append(f"bad-surface:{raw_surface!r}")
        else:
            warnings.append("missing-surface")

    raw_number = obj.get("tooth_number")
    tooth_number: str | None = None
    if raw_number not in (None, ""):
        candidate = str(raw_number).strip()
        if _FDI_PATTERN.match(candidate):
            tooth_number = candidate
        else:
            warnings.append(f"bad-tooth-number:{raw_number!r}")

    raw_conditions = obj.get("conditions")
    if isinstance(raw_conditions, list):
        structured_conditions = [str(c) for c in raw_conditions]
    else:
        structured_conditions = []
        if raw_conditions is not None:
            warnings.append("bad-conditions")

    short = obj.get("short_caption")
    short = short if isinstance(short, str) else ""
    long = obj.get("long_caption")
    long = long if isinstance(long, str) else ""

    if quality is Quality.GOOD and (not short.strip() or not long.strip()):
        quality = Quality.BAD
        warnings.append("empty-caption")

    if quality is Quality.GOOD:
        prose = f"{short}\n{long}".lower()
        if any(phrase in prose for phrase in _QUALITY_COMPLAINTS):
            warnings.append("quality-flag-caption-mismatch")

    return CaptionRecord(
        item_id=raw.item_id,
        quality=quality,
        tooth_type=tooth,
        inferred_type=infer_tooth_type(short, long, ontology),
        surface=surface,
        tooth_number=tooth_number,
        conditions=extract_conditions(short, long, structured_conditions, ontology),
        short_caption=short,
        long_caption=long,
        parse_warnings=warnings,
    )


def parse_batch(
    responses: list[RawResponse],
    dataset_by_item: Mapping[str, str] | None = None,
    ontology: Ontology = DEFAULT_ONTOLOGY,
) -> list[CaptionRecord]:
    """Parse every ok response; failed items are skipped and excluded downstream."""
    records: list[CaptionRecord] = []
    for raw in responses:
        if not raw.ok:
            logger.info("skipping %s: backend-failure after %d attempts", raw.item_id, raw.attempt_count)
            continue
        record = parse_structured(raw, ontology)
        if dataset_by_item:
            record.dataset_id = dataset_by_item.get(raw.item_id)
        records.append(record)
    return records


def quality_filter(records: list[CaptionRecord]) -> tuple[list[CaptionRecord], list[CaptionRecord]]:
    """Partition on the structured quality flag, both sides in input order."""
    good = [r for r in records if r.quality is Quality.GOOD]
    rejected = [r for r in records if r.quality is not Quality.GOOD]
    return good, rejected


def save_captions(records: list[CaptionRecord], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_obj(), ensure_ascii=False) + "\n")


def load_captions(path: Path | str, ontology: Ontology = DEFAULT_ONTOLOGY) -> list[CaptionRecord]:
    records: list[CaptionRecord] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            conditions: set[ConditionTag] = set()
            for phrase in obj.get("conditions", []):
                named = condition_from_name(str(phrase))
                if named is None:
                    kind = ontology.conditions.get(str(phrase).strip().lower())
                    named = ConditionTag(kind) if kind else other_condition(str(phrase))
                conditions.add(named)
            records.append(
                CaptionRecord(
                    item_id=obj["item_id"],
                    quality=Quality(obj["quality"]),
                    tooth_type=ToothType(obj["tooth_type"]),
                    inferred_type=ToothType(obj["inferred_type"]),
                    surface=Surface(obj["surface"]),
                    tooth_number=obj.get("tooth_number"),
                    conditions=conditions,
                    short_caption=obj.get("short_caption", ""),
                    long_caption=obj.get("long_caption", ""),
                    parse_warnings=list(obj.get("warnings", [])),
                    dataset_id=obj.get("dataset_id"),
                )
            )
    return records
