"""
Answer-quality metrics (exact match, BLEU-4, ROUGE-L, CIDEr, count accuracy) and the
evaluation of a predictions file against a counting QA file.
"""
import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from nltk.translate.bleu_score import sentence_bleu
from rouge_score import rouge_scorer

from .bench import CountQAItem, count_accuracy, read_qa
from .errors import DataError, DuplicateIdError, MissingIdError
from .vocab import load_templates

# Configure logging
logger = logging.getLogger(__name__)

ARTICLES = {"a", "an", "the"}
PUNCTUATION = re.compile(r"[^\w\s]")
REPORT_KEYS = ("accuracy", "exact_match", "bleu4", "rouge_l", "cider", "n_items")

_ROUGE = rouge_scorer.RougeScorer(["rougeL"])


def normalize_text(text: str, drop_articles: bool = False) -> str:
    """Lowercase, strip punctuation, collapse whitespace and optionally drop a leading article."""
    words = PUNCTUATION.sub("", text.lower()).split()
    if drop_articles and words and words[0] in ARTICLES:
        words = words[1:]
    return " ".join(words)


def _tokens(text: str) -> List[str]:
    return normalize_text(text).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def exact_match(prediction: str, references: Sequence[str]) -> int:
    target = normalize_text(prediction, drop_articles=True)
    return int(any(target == normalize_text(ref, drop_articles=True) for ref in references))


def _add_one_above_unigrams(p_n, references=None, hypothesis=None, hyp_len=0, **kwargs):
    """Zero n-gram precisions for n >= 2 become 1 / (ngram count + 1)."""
    smoothed = []
    for n, precision in enumerate(p_n, 1):
        if n > 1 and precision.numerator == 0:
            precision = 1.0 / (max(hyp_len - n + 1, 0) + 1)
        smoothed.append(precision)
    return smoothed


def bleu4(prediction: str, references: Sequence[str]) -> float:
    """Sentence BLEU-4 with add-one smoothing of zero counts for n >= 2 and the closest-length brevity penalty."""
    hypothesis = _tokens(prediction)
    if not hypothesis:
        return 0.0
    refs = [_tokens(ref) for ref in references]
    return float(sentence_bleu(refs, hypothesis, smoothing_function=_add_one_above_unigrams))


def rouge_l(prediction: str, references: Sequence[str]) -> float:
    """Best LCS F1 over the references."""
    hypothesis = normalize_text(prediction)
    if not hypothesis:
        return 0.0
    return max((_ROUGE.score(normalize_text(ref), hypothesis)["rougeL"].fmeasure for ref in references), default=0.0)


def cider_scores(candidates: Dict[str, str], references: Dict[str, Sequence[str]]) -> Dict[str, float]:
    """Per-candidate CIDEr (standard x10 scale) with IDF taken over the reference corpus."""
    if not references:
        raise DataError("empty corpus")
    missing = sorted(set(candidates) - set(references))
    if missing:
        raise MissingIdError(f"candidates without references: {missing[:5]}")

    ref_tokens = {key: [_tokens(ref) for ref in refs] for key, refs in references.items()}
    document_frequency: Counter = Counter()
    for refs in ref_tokens.values():
        document_frequency.update({g for ref in refs for n in range(1, 5) for g in _ngrams(ref, n)})
    log_corpus = math.log(float(len(references)))

    def vectors(tokens: List[str]) -> List[Tuple[Dict, float]]:
        result = []
        for n in range(1, 5):
            vec = {g: tf * (log_corpus - math.log(max(1.0, document_frequency[g])))
                   for g, tf in _ngrams(tokens, n).items()}
            result.append((vec, math.sqrt(sum(v * v for v in vec.values()))))
        return result

    def similarity(a: Tuple[Dict, float], b: Tuple[Dict, float]) -> float:
        (vec_a, norm_a), (vec_b, norm_b) = a, b
        if norm_a == 0 or norm_b == 0:
            return 0.0
        return sum(v * vec_b.get(g, 0.0) for g, v in vec_a.items()) / (norm_a * norm_b)

    scores = {}
    for key in sorted(candidates):
        hypothesis = vectors(_tokens(candidates[key]))
        refs = [vectors(ref) for ref in ref_tokens[key]]
        per_n = [sum(similarity(hypothesis[n], ref[n]) for ref in refs) / max(1, len(refs)) for n in range(4)]
        scores[key] = 10.0 * sum(per_n) / 4
    return scores


def cider(candidates: Dict[str, str], references: Dict[str, Sequence[str]]) -> float:
    if not candidates:
        raise DataError("no candidates to score")
    scores = cider_scores(candidates, references)
    return sum(scores.values()) / len(scores)


# Run evaluation

@dataclass
class MetricReport:
    """Aggregate metrics plus per-item scores and count breakdowns."""
    accuracy: float
    exact_match: float
    bleu4: float
    rouge_l: float
    cider: float
    n_items: int
    items: List[Dict] = field(default_factory=list)
    breakdown: Dict = field(default_factory=dict)

    def summary(self) -> Dict:
        return {key: getattr(self, key) for key in REPORT_KEYS}


def read_predictions(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Predictions file not found: {path}")
    predictions: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                qid, prediction = str(record["qid"]), str(record["prediction"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{line_number}: malformed prediction: {e}") from e
            if qid in predictions:
                raise DuplicateIdError(f"prediction for {qid} appears more than once")
            predictions[qid] = prediction
    return predictions


def _score_item(pair: Tuple[CountQAItem, str]) -> Dict:
    item, prediction = pair
    return {
        "qid": item.qid,
        "scene_id": item.scene_id,
        "label": item.label,
        "count": item.count,
        "prediction": prediction,
        "accuracy": count_accuracy(prediction, item.count),
        "exact_match": exact_match(prediction, item.answers),
        "bleu4": bleu4(prediction, item.answers),
        "rouge_l": rouge_l(prediction, item.answers),
    }


def _breakdown(frame: pd.DataFrame) -> Dict:
    def table(column: str) -> List[Dict]:
        grouped = frame.groupby(column, sort=True)["accuracy"].agg(questions="count", correct="sum").reset_index()
        grouped["accuracy"] = grouped["correct"] / grouped["questions"]
        return json.loads(grouped.to_json(orient="records"))

    return {
        "metadata": {"count_match": "any", "templates_version": load_templates()["version"]},
        "by_label": table("label"),
        "by_count": table("count"),
    }


def evaluate(items: Sequence[CountQAItem], predictions: Dict[str, str], workers: int = 1) -> MetricReport:
    """Score predictions against their questions, reducing in question-id order."""
    by_id: Dict[str, CountQAItem] = {}
    for item in items:
        if item.qid in by_id:
            raise DuplicateIdError(f"question id {item.qid} appears more than once")
        by_id[item.qid] = item
    unknown = sorted(set(predictions) - set(by_id))
    if unknown:
        raise MissingIdError(f"predictions reference unknown question ids: {unknown[:5]}")
    if not predictions:
        raise DataError("no predictions to evaluate")

    pairs = [(by_id[qid], predictions[qid]) for qid in sorted(predictions)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scored = list(executor.map(_score_item, pairs))
    else:
        scored = [_score_item(pair) for pair in pairs]

    consensus = cider_scores(
        {item.qid: prediction for item, prediction in pairs},
        {item.qid: item.answers for item, _ in pairs},
    )
    for record in scored:
        record["cider"] = consensus[record["qid"]]

    frame = pd.DataFrame(scored)
    means = frame[["accuracy", "exact_match", "bleu4", "rouge_l", "cider"]].mean()
    report = MetricReport(
        accuracy=float(means["accuracy"]),
        exact_match=float(means["exact_match"]),
        bleu4=float(means["bleu4"]),
        rouge_l=float(means["rouge_l"]),
        cider=float(means["cider"]),
        n_items=len(scored),
        items=scored,
        breakdown=_breakdown(frame),
    )
    logger.info(f"Evaluated {report.n_items} predictions: accuracy {report.accuracy:.3f}, CIDEr {report.cider:.3f}")
    return report


def evaluate_run(predictions_path: Union[str, Path], qa_path: Union[str, Path],
                 report_path: Optional[Union[str, Path]] = None, workers: int = 1) -> MetricReport:
    """Evaluate a predictions file; optionally write the report, per-item lines and breakdowns."""
    report = evaluate(read_qa(qa_path), read_predictions(predictions_path), workers)
    if report_path is not None:
        write_report(report, report_path)
    return report


def write_report(report: MetricReport, path: Union[str, Path]) -> Path:
    """``path`` gets the summary; ``.items.jsonl`` and ``.breakdown.json`` siblings get the details."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.summary(), indent=2))
    with open(path.with_suffix(".items.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for record in report.items:
            f.write(json.dumps(record) + "\n")
    path.with_suffix(".breakdown.json").write_text(json.dumps(report.breakdown, indent=2))
    logger.info(f"Wrote report to {path}")
    return path


def format_table(report: MetricReport) -> str:
    """One-row table in the usual reporting scale: percentages, CIDEr x10 of its standard scale."""
    row = {
        "Accuracy (%)": 100 * report.accuracy,
        "EM": 100 * report.exact_match,
        "BLEU-4": 100 * report.bleu4,
        "ROUGE-L": 100 * report.rouge_l,
        "CIDEr": 10 * report.cider,
        "N": report.n_items,
    }
    return pd.DataFrame([row]).to_string(index=False, float_format=lambda v: f"{v:.2f}")
