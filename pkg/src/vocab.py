"""
Word-level mock of the text tokenizer shared by the task prompt and the toy decoder.
"""
import json
import logging
import re
from functools import lru_cache
from typing import Dict, List, Sequence

from .config import TEMPLATES_FILE, VOCAB_FILE
from .errors import VocabularyError

# Configure logging
logger = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"[a-z]+|\d+|[^\sa-z\d]")
MAX_DIGIT_TOKEN = 99


@lru_cache(maxsize=None)
def load_templates() -> Dict:
    with open(TEMPLATES_FILE, "r", encoding="utf-8") as f:
        return json.load(f)


def pluralize(noun: str, count: int = 2) -> str:
    """English plural of the last word of ``noun`` unless ``count`` is 1."""
    if count == 1:
        return noun
    head, _, last = noun.rpartition(" ")
    irregular = load_templates()["irregular_plurals"]
    if last in irregular:
        plural = irregular[last]
    elif last.endswith(("s", "x", "z", "ch", "sh")):
        plural = last + "es"
    elif last.endswith("y") and last[-2:-1] not in "aeiou":
        plural = last[:-1] + "ies"
    else:
        plural = last + "s"
    return f"{head} {plural}" if head else plural


class TaskTokenizer:
    """Fixed, versioned word vocabulary; unknown words map to ``<unk>``."""

    def __init__(self, tokens: Sequence[str], labels: Sequence[str], version: int = 1):
        self.tokens: List[str] = list(dict.fromkeys(tokens))
        self.index = {token: i for i, token in enumerate(self.tokens)}
        self.labels = list(labels)
        self.version = version
        self.pad_id = self.index["<pad>"]
        self.bos_id = self.index["<bos>"]
        self.eos_id = self.index["<eos>"]
        self.unk_id = self.index["<unk>"]
        self.special_ids = {self.pad_id, self.bos_id, self.eos_id, self.unk_id}

    @classmethod
    @lru_cache(maxsize=None)
    def default(cls) -> "TaskTokenizer":
        with open(VOCAB_FILE, "r", encoding="utf-8") as f:
            spec = json.load(f)
        labels = spec["labels"]
        words = [w for label in labels for w in label.split()]
        plurals = [w for label in labels for w in pluralize(label).split()]
        digits = [str(i) for i in range(MAX_DIGIT_TOKEN + 1)]
        tokens = spec["specials"] + spec["words"] + words + plurals + digits
        tokenizer = cls(tokens, labels, spec["version"])
        logger.info(f"Loaded vocabulary v{tokenizer.version} with {len(tokenizer)} tokens")
        return tokenizer

    def __len__(self) -> int:
        return len(self.tokens)

    def split(self, text: str) -> List[str]:
        return TOKEN_PATTERN.findall(text.lower())

    def encode(self, text: str) -> List[int]:
        return [self.index.get(word, self.unk_id) for word in self.split(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of {len(self.tokens)}")
            if i in self.special_ids:
                continue
            token = self.tokens[i]
            if words and not token[0].isalnum():
                words[-1] += token
            else:
                words.append(token)
        return " ".join(words)
