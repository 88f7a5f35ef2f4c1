"""Two-level prompt templates for caption generation and their rendering."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

logger = logging.getLogger(__name__)

SLOT_PATTERN = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

PromptContext = Mapping[str, str]


class PromptingError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    level: int
    body: str
    required_slots: frozenset[str] = frozenset()
    output_contract: str = ""

    def body_slots(self) -> set[str]:
        return set(SLOT_PATTERN.findall(self.body))


LEVEL1_BODY = (
    "You are a dental expert. Look at this image of a single tooth. "
    "Write a SHORT caption (one sentence) and a LONG caption (2-4 sentences) "
    "describing what you see."
)

LEVEL2_BODY = """You are a dental expert examining a photograph of a single tooth taken from the {view} view.
Work through these steps in order:
1. Judge the image quality: "good" if the tooth can be assessed, "bad" if the image is blurry, too dark, low-resolution, or otherwise unusable.
2. Identify the tooth type as exactly one of: incisor, canine, premolar, molar. Never answer "anterior"; decide between incisor and canine even for front teeth.
3. Identify the visible tooth surface as one of: buccal, occlusal, anterior, lingual.
4. If you can tell, give the tooth number in FDI notation (two digits); otherwise use null.
5. List every visible condition among: caries, staining, enamel wear or loss, discoloration, demineralization, structural damage, and any others you can detect. Use "healthy" only when you see none. Do not assess gum disease.
6. Write a SHORT caption (one sentence) and a LONG caption (2-4 sentences) describing the tooth.
7. Respond with a single JSON object and no prose outside it, exactly in this shape:
{"quality": "good", "tooth_type": "molar", "surface": "occlusal", "tooth_number": "36", "conditions": ["caries"], "short_caption": "...", "long_caption": "..."}"""

LEVEL2_CONTRACT = (
    "single JSON object with keys quality, tooth_type, surface, tooth_number, "
    "conditions, short_caption, long_caption"
)

DEFAULT_LEVEL1 = PromptTemplate(level=1, body=LEVEL1_BODY, output_contract="short and long caption as free text")
DEFAULT_LEVEL2 = PromptTemplate(
    level=2,
    body=LEVEL2_BODY,
    required_slots=frozenset({"view"}),
    output_contract=LEVEL2_CONTRACT,
)


def default_template(level: int) -> PromptTemplate:
    if level == 1:
        return DEFAULT_LEVEL1
    if level == 2:
        return DEFAULT_LEVEL2
    raise PromptingError(f"no default template for level {level}")


def render_prompt(template: PromptTemplate, context: PromptContext) -> str:
    """Substitute every {slot} in the body from the context.

    Missing slots are an error; extra context keys are ignored with a warning.
    The result never contains an unsubstituted slot.
    """
    slots = template.body_slots()
    missing = sorted(slots - set(context))
    if missing:
        raise PromptingError("missing-slot:" + ",".join(missing))
    extra = sorted(set(context) - slots)
    if extra:
        logger.warning("prompt context keys ignored: %s", ", ".join(extra))

    rendered = SLOT_PATTERN.sub(lambda m: str(context[m.group(1)]), template.body)
    leftover = SLOT_PATTERN.findall(rendered)
    if leftover:
        raise PromptingError("unsubstituted slots after render: " + ",".join(leftover))
    return rendered


def validate_template(template: PromptTemplate) -> list[str]:
    """Return problems as data: slot-set mismatches and invalid levels."""
    problems: list[str] = []
    body_slots = template.body_slots()
    for slot in sorted(body_slots - template.required_slots):
        problems.append(f"body slot {{{slot}}} not declared in required_slots")
    for slot in sorted(template.required_slots - body_slots):
        problems.append(f"declared slot {{{slot}}} missing from body")
    if template.level not in (1, 2):
        problems.append(f"invalid level: {template.level}")
    return problems


_HEADER_PATTERN = re.compile(r"^#level:\s*([12])\s*$")


def load_template(path: Path | str) -> PromptTemplate:
    """Load a template file: a `#level: 1|2` header line, then the body.

    Required slots are inferred from the body's placeholders.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise PromptingError(f"empty template file: {path}")
    match = _HEADER_PATTERN.match(lines[0].strip())
    if not match:
        raise PromptingError(f"{path}: first line must be '#level: 1' or '#level: 2'")
    body = "\n".join(lines[1:]).strip("\n")
    if not body.strip():
        raise PromptingError(f"{path}: template body is empty")
    template = PromptTemplate(
        level=int(match.group(1)),
        body=body,
        required_slots=frozenset(SLOT_PATTERN.findall(body)),
    )
    return template
