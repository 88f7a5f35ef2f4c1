"""Generate the bundled demo corpus: 12 deterministic tooth-ish images with a
manifest and one detection box per image (two on the last, to exercise crop
indexing). Usable both from tests and as a standalone script:

    python tests/fixtures/make_corpus.py <target-dir>
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from PIL import Image, ImageDraw

# (filename, dataset_id, view, tooth_type, surface, base_color)
CORPUS_SPEC = [
    ("incisor_front_01.png", "dataset1", "anterior", "incisor", "anterior", (235, 225, 205)),
    ("incisor_front_02.png", "dataset1", "anterior", "incisor", "anterior", (228, 214, 190)),
    ("incisor_front_03.png", "dataset1", "anterior", "incisor", "anterior", (240, 232, 215)),
    ("canine_front_01.png", "dataset1", "anterior", "canine", "anterior", (225, 210, 182)),
    ("canine_front_02.png", "dataset1", "anterior", "canine", "anterior", (231, 219, 196)),
    ("canine_front_03.png", "dataset1", "anterior", "canine", "anterior", (219, 203, 176)),
    ("premolar_top_01.png", "dataset4", "occlusal", "premolar", "occlusal", (214, 199, 170)),
    ("premolar_top_02.png", "dataset4", "occlusal", "premolar", "occlusal", (222, 209, 184)),
    ("premolar_top_03.png", "dataset4", "occlusal", "premolar", "occlusal", (208, 192, 161)),
    ("molar_top_01.png", "dataset4", "occlusal", "molar", "occlusal", (217, 204, 178)),
    ("molar_top_02.png", "dataset4", "occlusal", "molar", "occlusal", (226, 215, 192)),
    ("molar_top_03.png", "dataset4", "occlusal", "molar", "occlusal", (211, 196, 168)),
]

IMAGE_SIZE = (160, 120)


def _draw_image(path: Path, index: int, color: tuple[int, int, int]) -> None:
    img = Image.new("RGB", IMAGE_SIZE, (90, 45, 50))
    draw = ImageDraw.Draw(img)
    # a crude crown-ish blob whose geometry varies per index, keeping bytes distinct
    x0, y0 = 30 + index, 20 + (index % 5)
    x1, y1 = 130 - index, 100 - (index % 7)
    draw.ellipse([x0, y0, x1, y1], fill=color)
    draw.rectangle([x0 + 20, y1 - 18, x1 - 20, y1], fill=(170, 130, 120))
    if index % 3 == 0:
        draw.ellipse([70, 40, 82 + index, 52], fill=(60, 40, 30))
    img.save(path, format="PNG")


def make_corpus(target: Path | str) -> Path:
    """Write images + manifest.csv + detections.jsonl into `target`."""
    target = Path(target)
    images_dir = target / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    manifest_lines = ["id,path,dataset_id,view,tooth_type,surface,width,height"]
    detections = []
    for index, (name, dataset_id, view, tooth, surface, color) in enumerate(CORPUS_SPEC):
        _draw_image(images_dir / name, index, color)
        rec_id = Path(name).stem
        manifest_lines.append(
            f"{rec_id},images/{name},{dataset_id},{view},{tooth},{surface},{IMAGE_SIZE[0]},{IMAGE_SIZE[1]}"
        )
        detections.append(
            {
                "image_id": rec_id,
                "x0": 25 + index,
                "y0": 15,
                "x1": 135 - index,
                "y1": 105,
                "tooth_type": tooth,
                "score": 0.9,
            }
        )
    # second detection on the last image exercises the _t2 crop suffix
    detections.append(
        {"image_id": Path(CORPUS_SPEC[-1][0]).stem, "x0": 10, "y0": 10, "x1": 60, "y1": 60,
         "tooth_type": CORPUS_SPEC[-1][3], "score": 0.55}
    )

    (target / "manifest.csv").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    with (target / "detections.jsonl").open("w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det) + "\n")
    return target


if __name__ == "__main__":
    out = make_corpus(sys.argv[1] if len(sys.argv) > 1 else "demo_corpus")
    print(f"corpus written to {out}")
