from __future__ import annotations

import random
from decimal import Decimal
from pathlib import Path

import pytest

from dencap.caption_parser import CaptionRecord, ConditionKind, ConditionTag, Quality, Surface
from dencap.catalog import ToothType, ViewCategory
from dencap.evaluator import (
    AccuracyRow,
    ReviewJudgment,
    Verdict,
    accuracy_csv,
    accuracy_table,
    confusion_matrix,
    dataset_label,
    disease_accuracy,
    disease_csv,
    fmt2,
    fmt4,
    label_accuracy,
    load_judgments,
    render_report,
    save_judgments,
)

from conftest import make_catalog, make_record

TYPES = [ToothType.INCISOR, ToothType.CANINE, ToothType.PREMOLAR, ToothType.MOLAR]
SURFACES = [Surface.BUCCAL, Surface.OCCLUSAL, Surface.ANTERIOR]


def caption(item_id, tooth=ToothType.INCISOR, inferred=ToothType.INCISOR, surface=Surface.BUCCAL,
            quality=Quality.GOOD, dataset_id=None) -> CaptionRecord:
    return CaptionRecord(
        item_id=item_id,
        quality=quality,
        tooth_type=tooth,
        inferred_type=inferred,
        surface=surface,
        tooth_number=None,
        conditions=set(),
        short_caption="s",
        long_caption="l",
        dataset_id=dataset_id,
    )


def eval_fixture(dataset_id: str, n: int, correct_type: int, correct_inferred: int, correct_surface: int):
    """n records whose truth is incisor/buccal; the first k of each field match."""
    truth_records = [
        make_record(f"{dataset_id}-{i}", Path("x.png"), dataset_id=dataset_id,
                    tooth=ToothType.INCISOR, surface=ViewCategory.BUCCAL)
        for i in range(n)
    ]
    records = [
        caption(
            f"{dataset_id}-{i}",
            tooth=ToothType.INCISOR if i < correct_type else ToothType.CANINE,
            inferred=ToothType.INCISOR if i < correct_inferred else ToothType.MOLAR,
            surface=Surface.BUCCAL if i < correct_surface else Surface.OCCLUSAL,
        )
        for i in range(n)
    ]
    return records, make_catalog(truth_records)


def test_all_correct_gives_unity():
    records, truth = eval_fixture("dataset1", 5, 5, 5, 5)
    rows = accuracy_table(records, truth)
    assert [fmt4(r.tooth_type_acc) for r in rows] == ["1.0000"]
    assert fmt4(rows[0].inferred_type_acc) == "1.0000"
    assert fmt4(rows[0].surface_acc) == "1.0000"


def test_dataset4_shaped_accuracy():
    records, truth = eval_fixture("dataset4", 12, 9, 9, 12)
    row = accuracy_table(records, truth)[0]
    assert (fmt4(row.tooth_type_acc), fmt4(row.inferred_type_acc), fmt4(row.surface_acc)) == (
        "0.7500", "0.7500", "1.0000",
    )
    assert row.n == 12


def test_dataset5_shaped_accuracy():
    records, truth = eval_fixture("dataset5", 13, 3, 2, 12)
    row = accuracy_table(records, truth)[0]
    assert (fmt4(row.tooth_type_acc), fmt4(row.inferred_type_acc), fmt4(row.surface_acc)) == (
        "0.2308", "0.1538", "0.9231",
    )


def test_unknown_prediction_is_always_a_mismatch():
    truth = make_catalog([make_record("a", Path("x.png"), tooth=ToothType.INCISOR)])
    rows = label_accuracy([caption("a", tooth=ToothType.UNKNOWN)], truth, "tooth_type")
    assert rows[0].n == 1 and rows[0].correct == 0


def test_missing_catalog_entry_excluded_from_n():
    records, truth = eval_fixture("dataset1", 3, 3, 3, 3)
    records.append(caption("ghost"))
    rows = label_accuracy(records, truth, "tooth_type")
    assert rows[0].n == 3


def test_records_without_truth_label_skipped():
    truth = make_catalog([
        make_record("a", Path("x.png"), tooth=ToothType.MOLAR, surface=None),
        make_record("b", Path("x.png"), tooth=None, surface=ViewCategory.BUCCAL),
    ])
    records = [caption("a", tooth=ToothType.MOLAR), caption("b", surface=Surface.BUCCAL)]
    assert label_accuracy(records, truth, "tooth_type")[0].n == 1
    assert label_accuracy(records, truth, "surface")[0].n == 1


def test_lingual_truth_surface_not_evaluated():
    truth = make_catalog([make_record("a", Path("x.png"), surface=ViewCategory.LINGUAL)])
    assert label_accuracy([caption("a", surface=Surface.LINGUAL)], truth, "surface") == []


def test_non_good_records_skipped():
    records, truth = eval_fixture("dataset1", 4, 4, 4, 4)
    records[0].quality = Quality.BAD
    assert label_accuracy(records, truth, "tooth_type")[0].n == 3


def test_confusion_perfect_is_diagonal():
    records, truth = eval_fixture("dataset1", 6, 6, 6, 6)
    matrix = confusion_matrix(records, truth, "tooth_type")
    assert matrix.counts == {("incisor", "incisor"): 6}


def test_confusion_counts_canine_as_incisor():
    truth = make_catalog(
        [make_record(f"c{i}", Path("x.png"), tooth=ToothType.CANINE) for i in range(2)]
    )
    records = [caption(f"c{i}", tooth=ToothType.INCISOR) for i in range(2)]
    matrix = confusion_matrix(records, truth, "tooth_type")
    assert matrix.cell("canine", "incisor") == 2
    assert matrix.trace() == 0


def _random_fixture(rng: random.Random):
    n = rng.randrange(1, 31)
    truth_records, records = [], []
    for i in range(n):
        dataset = rng.choice(["dataset1", "dataset2"])
        truth_tooth = rng.choice(TYPES)
        truth_records.append(
            make_record(f"r{i}", Path("x.png"), dataset_id=dataset, tooth=truth_tooth,
                        surface=ViewCategory.BUCCAL)
        )
        records.append(caption(f"r{i}", tooth=rng.choice(TYPES + [ToothType.UNKNOWN])))
    return records, make_catalog(truth_records)


def test_confusion_trace_equals_accuracy_correct_count():
    rng = random.Random(42)
    for _ in range(50):
        records, truth = _random_fixture(rng)
        by_dataset = {fa.dataset_id: fa for fa in label_accuracy(records, truth, "tooth_type")}
        total_correct = sum(fa.correct for fa in by_dataset.values())
        matrix = confusion_matrix(records, truth, "tooth_type")
        # third opinion: brute-force recount straight off the fixtures
        truth_map = truth.by_id()
        brute = sum(
            1
            for r in records
            if r.tooth_type is not ToothType.UNKNOWN
            and truth_map[r.item_id].truth_tooth_type is r.tooth_type
        )
        assert matrix.trace() == total_correct == brute
        assert matrix.total() == sum(fa.n for fa in by_dataset.values())


def test_row_sums_match_truth_counts():
    records, truth = eval_fixture("dataset1", 8, 3, 3, 3)
    matrix = confusion_matrix(records, truth, "tooth_type")
    assert matrix.row_sum("incisor") == 8


def judgment(item_id, caries=Verdict.CORRECT, reviewer="expert1", timestamp="2026-01-01T00:00:00",
             **extra) -> ReviewJudgment:
    verdicts = {
        "caries": caries,
        "staining": Verdict.CORRECT,
        "enamel_loss": Verdict.CORRECT,
        "discoloration": Verdict.CORRECT,
    }
    verdicts.update(extra)
    return ReviewJudgment(item_id=item_id, reviewer_id=reviewer, verdicts=verdicts, timestamp=timestamp)


def _disease_fixture(dataset_id: str, n: int, caries_correct: int):
    records = [caption(f"{dataset_id}-{i}", dataset_id=dataset_id) for i in range(n)]
    judgments = [
        judgment(f"{dataset_id}-{i}", caries=Verdict.CORRECT if i < caries_correct else Verdict.INCORRECT)
        for i in range(n)
    ]
    return judgments, records


def test_disease_dataset1_shaped():
    judgments, records = _disease_fixture("dataset1", 21, 20)
    row = disease_accuracy(judgments, records)[0]
    assert fmt2(row.percents["caries"]) == "95.24"
    assert row.n == 21


def test_disease_dataset4_shaped():
    judgments, records = _disease_fixture("dataset4", 11, 8)
    assert fmt2(disease_accuracy(judgments, records)[0].percents["caries"]) == "72.73"


def test_disease_perfect_score():
    judgments, records = _disease_fixture("dataset2", 20, 20)
    assert fmt2(disease_accuracy(judgments, records)[0].percents["caries"]) == "100.00"


def test_disease_all_not_applicable_has_no_denominator():
    records = [caption("a", dataset_id="dataset1")]
    j = judgment("a", caries=Verdict.NOT_APPLICABLE)
    row = disease_accuracy([j], records)[0]
    assert row.percents["caries"] is None
    assert "—" in render_report(disease_rows=[row], fmt="markdown")
    assert ",," in disease_csv([row]) or disease_csv([row]).rstrip().endswith(",")


def test_disease_reorder_invariance():
    judgments, records = _disease_fixture("dataset1", 9, 5)
    rng = random.Random(5)
    shuffled = judgments[:]
    rng.shuffle(shuffled)
    assert disease_accuracy(judgments, records) == disease_accuracy(shuffled, records)


def test_disease_duplicate_identical_judgment_is_idempotent():
    judgments, records = _disease_fixture("dataset1", 5, 4)
    assert disease_accuracy(judgments + [judgments[-1]], records) == disease_accuracy(judgments, records)


def test_disease_resubmission_latest_wins():
    records = [caption("a", dataset_id="dataset1")]
    first = judgment("a", caries=Verdict.INCORRECT, timestamp="2026-01-01T10:00:00")
    second = judgment("a", caries=Verdict.CORRECT, timestamp="2026-01-01T11:00:00")
    row = disease_accuracy([first, second], records)[0]
    assert fmt2(row.percents["caries"]) == "100.00"
    # and the reverse submission order changes nothing
    assert disease_accuracy([second, first], records)[0] == row


def test_disease_multi_reviewer_tie_counts_incorrect():
    records = [caption("a", dataset_id="dataset1")]
    judgments = [
        judgment("a", caries=Verdict.CORRECT, reviewer="expert1"),
        judgment("a", caries=Verdict.INCORRECT, reviewer="expert2"),
    ]
    assert fmt2(disease_accuracy(judgments, records)[0].percents["caries"]) == "0.00"


def test_disease_dangling_item_dropped():
    judgments, records = _disease_fixture("dataset1", 3, 3)
    judgments.append(judgment("ghost"))
    assert disease_accuracy(judgments, records)[0].n == 3


def test_judgments_jsonl_roundtrip(tmp_path):
    judgments, _ = _disease_fixture("dataset1", 2, 1)
    path = tmp_path / "judgments.jsonl"
    save_judgments(judgments, path)
    loaded = load_judgments(path)
    assert [j.to_json_obj() for j in loaded] == [j.to_json_obj() for j in judgments]


def test_render_markdown_row_format():
    records, truth = eval_fixture("dataset4", 12, 9, 9, 12)
    report = render_report(accuracy_rows=accuracy_table(records, truth), fmt="markdown")
    assert "Dataset 4 (12) | 0.7500 | 0.7500 | 1.0000" in report


def test_render_empty_rows_header_only():
    assert accuracy_csv([]) == "dataset_id,n,tooth_type_acc,inferred_type_acc,surface_acc\n"
    assert disease_csv([]) == "dataset_id,n,caries,staining,enamel,discoloration\n"


def test_render_deterministic():
    records, truth = eval_fixture("dataset5", 13, 3, 2, 12)
    rows = accuracy_table(records, truth)
    judgments, jrecords = _disease_fixture("dataset5", 13, 13)
    drows = disease_accuracy(judgments, jrecords)
    for fmt in ("text", "csv", "markdown"):
        a = render_report(accuracy_rows=rows, disease_rows=drows, fmt=fmt)
        b = render_report(accuracy_rows=rows, disease_rows=drows, fmt=fmt)
        assert a == b


def test_render_rejects_unknown_format():
    with pytest.raises(ValueError):
        render_report(fmt="pdf")


def test_accuracy_csv_values():
    records, truth = eval_fixture("dataset1", 494, 273, 311, 437)
    text = accuracy_csv(accuracy_table(records, truth))
    assert "dataset1,494,0.5526,0.6296,0.8846" in text


def test_fmt_helpers():
    assert fmt4(Decimal("1")) == "1.0000"
    assert fmt2(Decimal("100")) == "100.00"
    assert fmt4(None) == ""
    assert dataset_label("dataset4") == "Dataset 4"
    assert dataset_label("mystery") == "mystery"


def test_accuracy_row_bounds_property():
    rng = random.Random(9)
    for _ in range(30):
        records, truth = _random_fixture(rng)
        for row in accuracy_table(records, truth):
            for value in (row.tooth_type_acc, row.inferred_type_acc, row.surface_acc):
                if value is not None:
                    assert Decimal(0) <= value <= Decimal(1)
