import pytest

from src.errors import VocabularyError
from src.vocab import TaskTokenizer, load_templates, pluralize


def test_pluralize_rules():
    assert pluralize("chair") == "chairs"
    assert pluralize("box") == "boxes"
    assert pluralize("bottle", 1) == "bottle"
    assert pluralize("shelf") == "shelves"
    assert pluralize("window frame") == "window frames"
    assert pluralize("key") == "keys"
    assert pluralize("library") == "libraries"


def test_tokenizer_specials_and_digits(tokenizer):
    assert tokenizer.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert tokenizer.encode("42") == [tokenizer.index["42"]]
    assert len(tokenizer.tokens) == len(set(tokenizer.tokens))


def test_encode_decode_question(tokenizer):
    ids = tokenizer.encode("How many chairs are in the scene?")
    assert tokenizer.unk_id not in ids
    assert tokenizer.decode(ids) == "how many chairs are in the scene?"


def test_unknown_words_map_to_unk(tokenizer):
    assert tokenizer.encode("zebra") == [tokenizer.unk_id]


def test_decode_skips_specials_and_rejects_bad_ids(tokenizer):
    ids = [tokenizer.bos_id] + tokenizer.encode("3 chairs") + [tokenizer.eos_id]
    assert tokenizer.decode(ids) == "3 chairs"
    with pytest.raises(VocabularyError):
        tokenizer.decode([len(tokenizer)])


def test_templates_cover_every_question_variant():
    templates = load_templates()
    assert len(templates["questions"]) == 10
    assert len(templates["answers"]) == 5
    assert all("{label}" in question for question in templates["questions"])


def test_custom_vocabulary():
    tokenizer = TaskTokenizer(["<pad>", "<bos>", "<eos>", "<unk>", "cup", "two"], labels=["cup"], version=3)
    assert tokenizer.encode("two cup") == [5, 4]
    assert tokenizer.version == 3
