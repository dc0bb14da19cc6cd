"""
Object-counting benchmark: question generation from instance annotations and the count
accuracy rule.
"""
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import ANSWERS_PER_ITEM, ARTIFACT_MARKERS, COUNT_QA_ITEMS
from .errors import AnnotationError, DuplicateIdError
from .vocab import load_templates, pluralize

# Configure logging
logger = logging.getLogger(__name__)

UNITS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6, "seven": 7,
    "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12, "thirteen": 13,
    "fourteen": 14, "fifteen": 15, "sixteen": 16, "seventeen": 17, "eighteen": 18, "nineteen": 19,
}
TENS = {
    "twenty": 20, "thirty": 30, "forty": 40, "fifty": 50,
    "sixty": 60, "seventy": 70, "eighty": 80, "ninety": 90,
}
NUMBER_TOKEN = re.compile(r"\d+|[a-z]+")
COMPOUND_SEPARATOR = re.compile(r"-|\s+")


class CountQAItem(BaseModel):
    """One counting question with its reference answers."""
    model_config = ConfigDict(extra="forbid")

    scene_id: str
    qid: str
    question: str
    answers: List[str] = Field(min_length=ANSWERS_PER_ITEM, max_length=ANSWERS_PER_ITEM)
    label: str
    count: int = Field(ge=1)


@dataclass(frozen=True)
class ExclusionRules:
    """Labels that never become counting questions."""
    stuff_labels: FrozenSet[str]
    artifact_markers: Tuple[str, ...] = ARTIFACT_MARKERS

    @classmethod
    def default(cls) -> "ExclusionRules":
        templates = load_templates()
        return cls(frozenset(templates["stuff_labels"]), tuple(templates["artifact_markers"]))

    def excludes(self, label: str) -> bool:
        if label.strip().lower() in self.stuff_labels:
            return True
        # Markers are matched case-sensitively
        return any(marker in label for marker in self.artifact_markers)


def load_annotations(path: Union[str, Path]) -> List[Dict]:
    """Read one annotation object, a list of them, or a directory of ``*.annotations.json`` files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Annotations not found: {path}")
    if path.is_dir():
        records = []
        for file in sorted(path.glob("*.annotations.json")):
            records.extend(load_annotations(file))
        return records
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"annotations file {path} is not valid JSON: {e}") from e
    return data if isinstance(data, list) else [data]


def count_labels(annotations: Sequence[Dict], rules: Optional[ExclusionRules] = None) -> List[Tuple[str, str, int]]:
    """(scene_id, label, instance count) for every countable label, in scene then label order."""
    rules = rules or ExclusionRules.default()
    seen = set()
    counted = []
    for record in annotations:
        try:
            scene_id = str(record["scene_id"])
            labels = [str(instance["label"]) for instance in record["instances"]]
        except (KeyError, TypeError) as e:
            raise AnnotationError(f"malformed annotation record: {e}") from e
        if scene_id in seen:
            raise DuplicateIdError(f"scene {scene_id} is annotated twice")
        seen.add(scene_id)
        for label, count in sorted(Counter(labels).items()):
            if not rules.excludes(label):
                counted.append((scene_id, label, count))
    return counted


def _qid(scene_id: str, label: str) -> str:
    return f"{scene_id}__{label.replace(' ', '_')}"


def generate_count_qa(annotations: Sequence[Dict], n: int = COUNT_QA_ITEMS, seed: int = 0,
                      rules: Optional[ExclusionRules] = None) -> List[CountQAItem]:
    """Sample ``n`` (scene, label) pairs deterministically and phrase a question with five answers each."""
    candidates = count_labels(annotations, rules)
    if not candidates:
        raise AnnotationError("no countable labels in the annotations")
    templates = load_templates()
    rng = np.random.default_rng(seed)
    if len(candidates) > n:
        chosen = np.sort(rng.choice(len(candidates), size=n, replace=False))
    else:
        if len(candidates) < n:
            logger.warning(f"Only {len(candidates)} countable (scene, label) pairs for {n} requested items")
        chosen = np.arange(len(candidates))

    items = []
    for index in chosen:
        scene_id, label, count = candidates[index]
        question = templates["questions"][int(rng.integers(len(templates["questions"])))]
        fields = {"count": count, "noun": pluralize(label, count), "verb": "is" if count == 1 else "are"}
        items.append(CountQAItem(
            scene_id=scene_id,
            qid=_qid(scene_id, label),
            question=question.format(label=pluralize(label)),
            answers=[answer.format(**fields) for answer in templates["answers"]],
            label=label,
            count=count,
        ))
    logger.info(f"Generated {len(items)} counting questions from {len(candidates)} candidates")
    return items


def write_jsonl(records: Iterable[BaseModel], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.model_dump()) + "\n")
    return path


def read_qa(path: Union[str, Path]) -> List[CountQAItem]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"QA file not found: {path}")
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                items.append(CountQAItem(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as e:
                raise AnnotationError(f"{path}:{line_number}: malformed QA record: {e}") from e
    return items


# Count accuracy

def extract_numbers(text: str) -> List[int]:
    """Digit runs and English number words (zero to ninety-nine), in order of appearance."""
    text = text.lower()
    matches = list(NUMBER_TOKEN.finditer(text))
    numbers = []
    i = 0
    while i < len(matches):
        token = matches[i].group()
        if token.isdigit():
            numbers.append(int(token))
        elif token in UNITS:
            numbers.append(UNITS[token])
        elif token in TENS:
            value = TENS[token]
            if i + 1 < len(matches):
                following = matches[i + 1]
                separator = text[matches[i].end():following.start()]
                if 1 <= UNITS.get(following.group(), 0) <= 9 and COMPOUND_SEPARATOR.fullmatch(separator):
                    value += UNITS[following.group()]
                    i += 1
            numbers.append(value)
        i += 1
    return numbers


def count_accuracy(prediction: str, count: int) -> int:
    """1 when any number in the prediction equals ``count``."""
    return int(count in extract_numbers(prediction))
