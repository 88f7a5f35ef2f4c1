from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dencap.catalog import (
    Catalog,
    CatalogError,
    ToothType,
    ViewCategory,
    filter_views,
    ingest_manifest,
    load_catalog_jsonl,
    merge_catalogs,
    parse_tooth_type,
    summarize,
)

from conftest import make_catalog, make_image, make_record

HEADER = "id,path,dataset_id,view,tooth_type,surface,width,height"


def write_manifest(tmp_path: Path, rows: list[str], name: str = "manifest.csv") -> Path:
    path = tmp_path / name
    path.write_text("\n".join([HEADER] + rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture()
def img(tmp_path) -> Path:
    return make_image(tmp_path / "images" / "a.png")


def test_ingest_three_valid_rows(tmp_path, img):
    rows = [f"t{i},images/a.png,dataset1,anterior,incisor,anterior,64,48" for i in range(3)]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    assert len(catalog) == 3
    assert all(not r.excluded for r in catalog)
    assert [r.id for r in catalog] == ["t0", "t1", "t2"]


def test_ingest_bad_view_marks_excluded_not_dropped(tmp_path, img):
    # "side" is not a member of the view enumeration
    assert "side" not in {v.value for v in ViewCategory}
    rows = [
        "t0,images/a.png,dataset1,anterior,incisor,anterior,64,48",
        "t1,images/a.png,dataset1,side,incisor,anterior,64,48",
    ]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    assert len(catalog) == 2
    bad = catalog.records[1]
    assert bad.excluded and bad.exclude_reason == "bad-view:side"
    assert len(catalog.active()) == 1


def test_ingest_dataset1_counts_match_source_table(tmp_path, img):
    rows = [f"i{k},images/a.png,dataset1,anterior,incisor,anterior,64,48" for k in range(250)]
    rows += [f"c{k},images/a.png,dataset1,anterior,canine,anterior,64,48" for k in range(250)]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    table = summarize(catalog)
    row = table.row("dataset1")
    assert row.by_type[ToothType.INCISOR] == 250
    assert row.by_type[ToothType.CANINE] == 250
    assert row.total == 500


def test_ingest_missing_manifest_is_fatal(tmp_path):
    with pytest.raises(CatalogError, match="not found"):
        ingest_manifest(tmp_path / "nope.csv")


def test_ingest_missing_image_excluded(tmp_path, img):
    rows = ["t0,images/gone.png,dataset1,anterior,incisor,anterior,64,48"]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    assert catalog.records[0].exclude_reason == "missing-file"


def test_ingest_duplicate_id_fatal_names_the_id(tmp_path, img):
    rows = [
        "dup,images/a.png,dataset1,anterior,incisor,anterior,64,48",
        "dup,images/a.png,dataset1,anterior,canine,anterior,64,48",
    ]
    with pytest.raises(CatalogError, match="dup"):
        ingest_manifest(write_manifest(tmp_path, rows))


def test_ingest_jsonl_manifest(tmp_path, img):
    path = tmp_path / "manifest.jsonl"
    obj = {
        "id": "t0", "path": "images/a.png", "dataset_id": "dataset2", "view": "buccal",
        "tooth_type": "molar", "surface": "buccal", "width": 64, "height": 48,
    }
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")
    catalog = ingest_manifest(path)
    assert catalog.records[0].truth_tooth_type is ToothType.MOLAR
    assert catalog.records[0].view is ViewCategory.BUCCAL


def test_ingest_dataset_id_argument_fills_empty_column(tmp_path, img):
    rows = ["t0,images/a.png,,anterior,incisor,anterior,64,48"]
    catalog = ingest_manifest(write_manifest(tmp_path, rows), dataset_id="dataset9")
    assert catalog.records[0].dataset_id == "dataset9"


def test_ingest_empty_truth_labels_allowed(tmp_path, img):
    rows = ["t0,images/a.png,dataset6,occlusal,,,64,48"]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    record = catalog.records[0]
    assert not record.excluded
    assert record.truth_tooth_type is None and record.truth_surface is None


def test_parse_tooth_type_collapses_incisors():
    assert parse_tooth_type("central incisor") is ToothType.INCISOR
    assert parse_tooth_type("Lateral Incisor") is ToothType.INCISOR
    assert parse_tooth_type("bicuspid") is ToothType.PREMOLAR
    assert parse_tooth_type("sideways") is None


def test_filter_views_identity(tmp_path):
    records = [make_record(f"r{i}", tmp_path / "x.png") for i in range(4)]
    catalog = make_catalog(records)
    assert filter_views(catalog, set(ViewCategory)).records == records


def test_filter_views_keeps_order(tmp_path):
    occ = [make_record(f"o{i}", tmp_path / "x.png", view=ViewCategory.OCCLUSAL) for i in range(5)]
    buc = [make_record(f"b{i}", tmp_path / "x.png", view=ViewCategory.BUCCAL) for i in range(3)]
    interleaved = [occ[0], buc[0], occ[1], occ[2], buc[1], occ[3], buc[2], occ[4]]
    kept = filter_views(make_catalog(interleaved), {ViewCategory.OCCLUSAL})
    assert [r.id for r in kept] == ["o0", "o1", "o2", "o3", "o4"]


def test_filter_views_empty_filter_is_error(tmp_path):
    catalog = make_catalog([make_record("r0", tmp_path / "x.png")])
    with pytest.raises(CatalogError, match="empty-view-filter"):
        filter_views(catalog, set())


def test_summarize_empty_catalog():
    assert summarize(make_catalog([])).rows == []


def test_summarize_dataset4_row(tmp_path):
    records = [
        make_record(f"p{i}", tmp_path / "x.png", dataset_id="dataset4", tooth=ToothType.PREMOLAR)
        for i in range(43)
    ] + [
        make_record(f"m{i}", tmp_path / "x.png", dataset_id="dataset4", tooth=ToothType.MOLAR)
        for i in range(44)
    ]
    row = summarize(make_catalog(records)).row("dataset4")
    assert row.by_type[ToothType.PREMOLAR] == 43
    assert row.by_type[ToothType.MOLAR] == 44
    assert row.total == 87


def test_summarize_dataset6_row(tmp_path):
    spec = [(ToothType.INCISOR, 4), (ToothType.CANINE, 6), (ToothType.PREMOLAR, 90), (ToothType.MOLAR, 258)]
    records = []
    for tooth, count in spec:
        records += [
            make_record(f"{tooth.value}{i}", tmp_path / "x.png", dataset_id="dataset6", tooth=tooth)
            for i in range(count)
        ]
    row = summarize(make_catalog(records)).row("dataset6")
    assert [row.by_type[t] for t, _ in spec] == [4, 6, 90, 258]
    assert row.total == 358


def test_summarize_untyped_records_count_in_total_only(tmp_path):
    records = [
        make_record("a", tmp_path / "x.png", dataset_id="dataset6", tooth=None),
        make_record("b", tmp_path / "x.png", dataset_id="dataset6", tooth=ToothType.MOLAR),
    ]
    row = summarize(make_catalog(records)).row("dataset6")
    assert row.by_type.get(ToothType.MOLAR) == 1
    assert row.untyped == 1
    assert row.total == 2


def test_summarize_skips_excluded(tmp_path):
    records = [
        make_record("a", tmp_path / "x.png"),
        make_record("b", tmp_path / "x.png").exclude("missing-file"),
    ]
    assert summarize(make_catalog(records)).row("dataset1").total == 1


def test_counts_csv_format(tmp_path):
    records = [make_record("a", tmp_path / "x.png", dataset_id="dataset4", tooth=ToothType.MOLAR)]
    csv_text = summarize(make_catalog(records)).render_csv()
    assert csv_text == "dataset_id,incisor,canine,premolar,molar,total\ndataset4,0,0,0,1,1\n"


record_specs = st.lists(
    st.tuples(
        st.sampled_from(["dataset1", "dataset2", "dataset3"]),
        st.sampled_from(list(ToothType) + [None]),
        st.sampled_from(list(ViewCategory)),
        st.booleans(),
    ),
    max_size=60,
)


@given(record_specs)
def test_summarize_totals_are_cell_sums(specs):
    records = [
        make_record(f"r{i}", Path("x.png"), dataset_id=ds, tooth=tooth, view=view)
        if not excl
        else make_record(f"r{i}", Path("x.png"), dataset_id=ds, tooth=tooth, view=view).exclude("why")
        for i, (ds, tooth, view, excl) in enumerate(specs)
    ]
    table = summarize(make_catalog(records))
    for row in table.rows:
        assert row.total == sum(row.by_type.values()) + row.untyped
        assert row.total == sum(
            1 for r in records if not r.excluded and r.dataset_id == row.dataset_id
        )


@given(record_specs, st.randoms())
def test_summarize_insensitive_to_row_order(specs, rnd):
    records = [
        make_record(f"r{i}", Path("x.png"), dataset_id=ds, tooth=tooth, view=view)
        for i, (ds, tooth, view, _) in enumerate(specs)
    ]
    shuffled = records[:]
    rnd.shuffle(shuffled)
    table_a = summarize(make_catalog(records))
    table_b = summarize(make_catalog(shuffled))
    assert {r.dataset_id: (r.by_type, r.untyped) for r in table_a.rows} == {
        r.dataset_id: (r.by_type, r.untyped) for r in table_b.rows
    }


@given(record_specs, st.sets(st.sampled_from(list(ViewCategory)), min_size=1))
def test_filtered_catalog_never_reports_outside_views(specs, allowed):
    records = [
        make_record(f"r{i}", Path("x.png"), dataset_id=ds, tooth=tooth, view=view)
        for i, (ds, tooth, view, _) in enumerate(specs)
    ]
    kept = filter_views(make_catalog(records), allowed)
    assert all(r.view in allowed for r in kept)


def test_catalog_jsonl_roundtrip(tmp_path, img):
    rows = [
        "t0,images/a.png,dataset1,anterior,incisor,anterior,64,48",
        "t1,images/gone.png,dataset1,buccal,,,64,48",
    ]
    catalog = ingest_manifest(write_manifest(tmp_path, rows))
    out = tmp_path / "catalog.jsonl"
    catalog.save_jsonl(out)
    loaded = load_catalog_jsonl(out)
    assert [r.to_json_obj() for r in loaded] == [r.to_json_obj() for r in catalog]


def test_merge_catalogs_rejects_duplicate_ids(tmp_path):
    a = make_catalog([make_record("same", tmp_path / "x.png")])
    b = make_catalog([make_record("same", tmp_path / "y.png")])
    with pytest.raises(CatalogError, match="same"):
        merge_catalogs([a, b])
