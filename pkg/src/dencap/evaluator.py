"""Accuracy tables, confusion matrices, disease accuracy from expert review."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .caption_parser import CaptionRecord, Quality
from .catalog import Catalog, CountsTable, ImageRecord

logger = logging.getLogger(__name__)

ACCURACY_FIELDS = ("tooth_type", "inferred_type", "surface")


def round_half_up(value: Decimal, places: int) -> Decimal:
    return value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def fmt4(value: float | Decimal | None) -> str:
    if value is None:
        return ""
    return str(round_half_up(Decimal(str(value)), 4))


def fmt2(value: float | Decimal | None) -> str:
    if value is None:
        return ""
    return str(round_half_up(Decimal(str(value)), 2))


def dataset_label(dataset_id: str) -> str:
    match = re.fullmatch(r"dataset[_ ]?(\d+)", dataset_id, re.IGNORECASE)
    return f"Dataset {match.group(1)}" if match else dataset_id


@dataclass
class FieldAccuracy:
    """Per-dataset accuracy of one predicted field against truth."""

    dataset_id: str
    n: int
    correct: int

    @property
    def accuracy(self) -> Decimal:
        if self.n == 0:
            return Decimal("0")
        return round_half_up(Decimal(self.correct) / Decimal(self.n), 4)


def _truth_term(record: ImageRecord, field_name: str) -> str | None:
    if field_name in ("tooth_type", "inferred_type"):
        return record.truth_tooth_type.value if record.truth_tooth_type else None
    if record.truth_surface is None:
        return None
    if not record.truth_surface.supported_for_evaluation:
        return None
    return record.truth_surface.value


def _predicted_term(record: CaptionRecord, field_name: str) -> str:
    return getattr(record, field_name).value


def label_accuracy(
    records: list[CaptionRecord], truth: Catalog, field_name: str
) -> list[FieldAccuracy]:
    """Accuracy of one field per dataset over quality-good records with truth.

    A match is canonical-term equality (case-insensitive); an `unknown`
    prediction never matches. Records without a catalog entry, without the
    relevant truth label, or with an unevaluatable truth (lingual surface)
    drop out of n with a warning.
    """
    if field_name not in ACCURACY_FIELDS:
        raise ValueError(f"unknown accuracy field: {field_name}")
    truth_by_id = truth.by_id()
    tallies: dict[str, FieldAccuracy] = {}
    for record in records:
        if record.quality is not Quality.GOOD:
            logger.warning("skipping non-good record in accuracy: %s", record.item_id)
            continue
        truth_record = truth_by_id.get(record.item_id)
        if truth_record is None:
            logger.warning("no catalog entry for %s; excluded from accuracy", record.item_id)
            continue
        truth_term = _truth_term(truth_record, field_name)
        if truth_term is None:
            continue
        dataset_id = truth_record.dataset_id
        tally = tallies.setdefault(dataset_id, FieldAccuracy(dataset_id, 0, 0))
        tally.n += 1
        predicted = _predicted_term(record, field_name)
        if predicted != "unknown" and predicted.lower() == truth_term.lower():
            tally.correct += 1
    return [tallies[k] for k in sorted(tallies)]


@dataclass
class AccuracyRow:
    dataset_id: str
    n: int
    tooth_type_acc: Decimal | None
    inferred_type_acc: Decimal | None
    surface_acc: Decimal | None


def accuracy_table(records: list[CaptionRecord], truth: Catalog) -> list[AccuracyRow]:
    """Combined per-dataset table over the three accuracy fields."""
    per_field = {f: {fa.dataset_id: fa for fa in label_accuracy(records, truth, f)} for f in ACCURACY_FIELDS}
    dataset_ids = sorted({ds for field_map in per_field.values() for ds in field_map})
    rows = []
    for ds in dataset_ids:
        ns = [per_field[f][ds].n for f in ACCURACY_FIELDS if ds in per_field[f]]
        rows.append(
            AccuracyRow(
                dataset_id=ds,
                n=max(ns),
                tooth_type_acc=_field_acc(per_field, "tooth_type", ds),
                inferred_type_acc=_field_acc(per_field, "inferred_type", ds),
                surface_acc=_field_acc(per_field, "surface", ds),
            )
        )
    return rows


def _field_acc(per_field: dict, field_name: str, dataset_id: str) -> Decimal | None:
    fa = per_field[field_name].get(dataset_id)
    if fa is None or fa.n == 0:
        return None
    # accuracy x n must round back to the exact correct count
    assert int(round(float(fa.accuracy) * fa.n)) == fa.correct
    return fa.accuracy


@dataclass
class ConfusionMatrix:
    """Counts indexed (truth term, predicted term); built by direct recount."""

    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def add(self, truth_term: str, predicted_term: str) -> None:
        key = (truth_term, predicted_term)
        self.counts[key] = self.counts.get(key, 0) + 1

    def cell(self, truth_term: str, predicted_term: str) -> int:
        return self.counts.get((truth_term, predicted_term), 0)

    def truth_terms(self) -> list[str]:
        return sorted({t for t, _ in self.counts})

    def predicted_terms(self) -> list[str]:
        return sorted({p for _, p in self.counts})

    def row_sum(self, truth_term: str) -> int:
        return sum(c for (t, _), c in self.counts.items() if t == truth_term)

    def trace(self) -> int:
        return sum(c for (t, p), c in self.counts.items() if t == p)

    def total(self) -> int:
        return sum(self.counts.values())

    def render_text(self) -> str:
        preds = self.predicted_terms()
        lines = ["truth\\predicted  " + "  ".join(preds)]
        for t in self.truth_terms():
            lines.append(t.ljust(16) + "  " + "  ".join(str(self.cell(t, p)).rjust(len(p)) for p in preds))
        return "\n".join(lines) + "\n"


def confusion_matrix(records: list[CaptionRecord], truth: Catalog, field_name: str) -> ConfusionMatrix:
    """Truth-vs-predicted counts over the same population label_accuracy uses."""
    if field_name not in ACCURACY_FIELDS:
        raise ValueError(f"unknown accuracy field: {field_name}")
    truth_by_id = truth.by_id()
    matrix = ConfusionMatrix()
    for record in records:
        if record.quality is not Quality.GOOD:
            continue
        truth_record = truth_by_id.get(record.item_id)
        if truth_record is None:
            continue
        truth_term = _truth_term(truth_record, field_name)
        if truth_term is None:
            continue
        matrix.add(truth_term.lower(), _predicted_term(record, field_name).lower())
    return matrix


class Verdict(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    NOT_APPLICABLE = "not_applicable"


CORE_VERDICT_CONDITIONS = ("caries", "staining", "enamel_loss", "discoloration")


@dataclass
class ReviewJudgment:
    item_id: str
    reviewer_id: str
    verdicts: dict[str, Verdict]
    timestamp: str

    def to_json_obj(self) -> dict:
        return {
            "item_id": self.item_id,
            "reviewer_id": self.reviewer_id,
            "verdicts": {k: v.value for k, v in self.verdicts.items()},
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "ReviewJudgment":
        return cls(
            item_id=obj["item_id"],
            reviewer_id=obj.get("reviewer_id") or obj.get("reviewer") or "",
            verdicts={str(k): Verdict(v) for k, v in obj.get("verdicts", {}).items()},
            timestamp=obj.get("timestamp", ""),
        )


def save_judgments(judgments: Iterable[ReviewJudgment], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for j in judgments:
            fh.write(json.dumps(j.to_json_obj(), ensure_ascii=False) + "\n")


def load_judgments(path: Path | str) -> list[ReviewJudgment]:
    judgments = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                judgments.append(ReviewJudgment.from_json_obj(json.loads(line)))
    return judgments


@dataclass
class DiseaseAccuracyRow:
    dataset_id: str
    n: int
    percents: dict[str, Decimal | None]


def _effective_verdicts(
    judgments: list[ReviewJudgment],
) -> dict[tuple[str, str, str], Verdict]:
    """Latest verdict per (item, reviewer, condition); later input wins ties."""
    effective: dict[tuple[str, str, str], tuple[str, int, Verdict]] = {}
    for position, judgment in enumerate(judgments):
        for condition, verdict in judgment.verdicts.items():
            key = (judgment.item_id, judgment.reviewer_id, condition)
            stamp = (judgment.timestamp, position)
            if key not in effective or stamp >= effective[key][:2]:
                effective[key] = (judgment.timestamp, position, verdict)
    return {key: verdict for key, (_, _, verdict) in effective.items()}


def disease_accuracy(
    judgments: list[ReviewJudgment], records: list[CaptionRecord]
) -> list[DiseaseAccuracyRow]:
    """Percent of correct condition assessments per dataset (expert review).

    Latest judgment wins per (item, reviewer, condition); across reviewers the
    majority decides, with ties conservatively counted incorrect. Items whose
    verdicts are all not_applicable for a condition leave that cell without a
    denominator. n is the number of distinct judged items in the dataset.
    """
    dataset_by_item = {r.item_id: r.dataset_id or "" for r in records}
    kept = []
    for judgment in judgments:
        if judgment.item_id not in dataset_by_item:
            logger.warning("judgment for unknown item %s dropped", judgment.item_id)
            continue
        kept.append(judgment)

    effective = _effective_verdicts(kept)

    # (item, condition) -> verdict via majority across reviewers
    votes: dict[tuple[str, str], list[Verdict]] = {}
    for (item_id, _, condition), verdict in effective.items():
        if verdict is not Verdict.NOT_APPLICABLE:
            votes.setdefault((item_id, condition), []).append(verdict)

    conditions = sorted({c for _, c in votes} | set(CORE_VERDICT_CONDITIONS))
    judged_items: dict[str, set[str]] = {}
    for judgment in kept:
        judged_items.setdefault(dataset_by_item[judgment.item_id], set()).add(judgment.item_id)

    rows = []
    for dataset_id in sorted(judged_items):
        items = judged_items[dataset_id]
        percents: dict[str, Decimal | None] = {}
        for condition in conditions:
            correct = incorrect = 0
            for item in items:
                verdicts = votes.get((item, condition))
                if not verdicts:
                    continue
                yes = sum(1 for v in verdicts if v is Verdict.CORRECT)
                no = len(verdicts) - yes
                if yes > no:
                    correct += 1
                else:
                    incorrect += 1
            if correct + incorrect == 0:
                percents[condition] = None
            else:
                percents[condition] = round_half_up(
                    Decimal(100) * Decimal(correct) / Decimal(correct + incorrect), 2
                )
        rows.append(DiseaseAccuracyRow(dataset_id=dataset_id, n=len(items), percents=percents))
    return rows


DISEASE_CSV_COLUMNS = ("caries", "staining", "enamel_loss", "discoloration")
DISEASE_CSV_HEADER = "dataset_id,n,caries,staining,enamel,discoloration"


def accuracy_csv(rows: list[AccuracyRow]) -> str:
    lines = ["dataset_id,n,tooth_type_acc,inferred_type_acc,surface_acc"]
    for row in rows:
        lines.append(
            f"{row.dataset_id},{row.n},{fmt4(row.tooth_type_acc)},"
            f"{fmt4(row.inferred_type_acc)},{fmt4(row.surface_acc)}"
        )
    return "\n".join(lines) + "\n"


def disease_csv(rows: list[DiseaseAccuracyRow]) -> str:
    lines = [DISEASE_CSV_HEADER]
    for row in rows:
        cells = [fmt2(row.percents.get(c)) for c in DISEASE_CSV_COLUMNS]
        lines.append(f"{row.dataset_id},{row.n},{','.join(cells)}")
    return "\n".join(lines) + "\n"


def _accuracy_markdown(rows: list[AccuracyRow]) -> list[str]:
    lines = ["Dataset | tooth_type | inferred_type | surface", "--- | --- | --- | ---"]
    for row in rows:
        cells = [fmt4(row.tooth_type_acc) or "—", fmt4(row.inferred_type_acc) or "—", fmt4(row.surface_acc) or "—"]
        lines.append(f"{dataset_label(row.dataset_id)} ({row.n}) | " + " | ".join(cells))
    return lines


def _disease_markdown(rows: list[DiseaseAccuracyRow]) -> list[str]:
    lines = ["Dataset | caries | staining | enamel | discoloration", "--- | --- | --- | --- | ---"]
    for row in rows:
        cells = [fmt2(row.percents.get(c)) or "—" for c in DISEASE_CSV_COLUMNS]
        lines.append(f"{dataset_label(row.dataset_id)} ({row.n}) | " + " | ".join(cells))
    return lines


def render_report(
    accuracy_rows: list[AccuracyRow] | None = None,
    disease_rows: list[DiseaseAccuracyRow] | None = None,
    counts: CountsTable | None = None,
    fmt: str = "text",
) -> str:
    """Deterministic document over whichever tables are provided."""
    if fmt not in ("text", "csv", "markdown"):
        raise ValueError(f"unknown report format: {fmt}")
    sections: list[str] = []
    if counts is not None:
        if fmt == "csv":
            sections.append(counts.render_csv())
        elif fmt == "markdown":
            body = ["Dataset | incisor | canine | premolar | molar | total", "--- | --- | --- | --- | --- | ---"]
            from .catalog import COUNT_COLUMNS

            for row in counts.rows:
                cells = [str(row.by_type.get(t, 0)) for t in COUNT_COLUMNS]
                body.append(f"{dataset_label(row.dataset_id)} | " + " | ".join(cells) + f" | {row.total}")
            sections.append("## Image counts\n\n" + "\n".join(body) + "\n")
        else:
            sections.append("Image counts\n\n" + counts.render_text())
    if accuracy_rows is not None:
        if fmt == "csv":
            sections.append(accuracy_csv(accuracy_rows))
        elif fmt == "markdown":
            sections.append("## Label accuracy\n\n" + "\n".join(_accuracy_markdown(accuracy_rows)) + "\n")
        else:
            header = f"{'dataset':<18}{'n':>6}  {'tooth_type':>10}  {'inferred_type':>13}  {'surface':>8}"
            lines = [header]
            for row in accuracy_rows:
                lines.append(
                    f"{dataset_label(row.dataset_id):<18}{row.n:>6}  {fmt4(row.tooth_type_acc) or '—':>10}"
                    f"  {fmt4(row.inferred_type_acc) or '—':>13}  {fmt4(row.surface_acc) or '—':>8}"
                )
            sections.append("Label accuracy\n\n" + "\n".join(lines) + "\n")
    if disease_rows is not None:
        if fmt == "csv":
            sections.append(disease_csv(disease_rows))
        elif fmt == "markdown":
            sections.append("## Disease accuracy\n\n" + "\n".join(_disease_markdown(disease_rows)) + "\n")
        else:
            header = f"{'dataset':<18}{'n':>6}  {'caries':>7}  {'staining':>8}  {'enamel':>7}  {'discoloration':>13}"
            lines = [header]
            for row in disease_rows:
                cells = [fmt2(row.percents.get(c)) or "—" for c in DISEASE_CSV_COLUMNS]
                lines.append(
                    f"{dataset_label(row.dataset_id):<18}{row.n:>6}  {cells[0]:>7}  {cells[1]:>8}"
                    f"  {cells[2]:>7}  {cells[3]:>13}"
                )
            sections.append("Disease accuracy\n\n" + "\n".join(lines) + "\n")
    return "\n".join(sections)
