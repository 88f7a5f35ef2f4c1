from __future__ import annotations

import sys
from pathlib import Path

import pytest
from PIL import Image

from dencap.catalog import Catalog, ImageRecord, Provenance, ToothType, ViewCategory
from dencap.vlm_client import NonRetryableBackendError, RetryableBackendError

sys.path.insert(0, str(Path(__file__).parent / "fixtures"))

from make_corpus import make_corpus  # noqa: E402


def make_image(path: Path, size=(64, 48), color=(200, 180, 160)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path)
    return path


def make_record(
    rec_id: str,
    path: Path,
    dataset_id: str = "dataset1",
    view: ViewCategory = ViewCategory.ANTERIOR,
    tooth: ToothType | None = ToothType.INCISOR,
    surface: ViewCategory | None = ViewCategory.ANTERIOR,
    size=(64, 48),
) -> ImageRecord:
    return ImageRecord(
        id=rec_id,
        source_path=path,
        dataset_id=dataset_id,
        view=view,
        truth_tooth_type=tooth,
        truth_surface=surface,
        width_px=size[0],
        height_px=size[1],
    )


def make_catalog(records: list[ImageRecord], source: str = "test") -> Catalog:
    from datetime import datetime, timezone

    return Catalog(records=records, provenance=Provenance(Path(source), datetime.now(timezone.utc)))


class ScriptedBackend:
    """Backend whose first `fail_times` attempts raise; used for retry tests."""

    def __init__(self, fail_times: int = 0, response: str = '{"quality": "good"}', non_retryable: bool = False):
        self.fail_times = fail_times
        self.response = response
        self.non_retryable = non_retryable
        self.calls = 0

    def complete(self, image_path, prompt):
        self.calls += 1
        if self.calls <= self.fail_times:
            if self.non_retryable:
                raise NonRetryableBackendError(f"scripted permanent failure {self.calls}")
            raise RetryableBackendError(f"scripted failure {self.calls}")
        return self.response


@pytest.fixture()
def tooth_image(tmp_path) -> Path:
    return make_image(tmp_path / "tooth.png")


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    return make_corpus(tmp_path_factory.mktemp("corpus"))
