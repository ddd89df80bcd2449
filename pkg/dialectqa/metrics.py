"""Scoring: classification F1, token F1, dialect disparity, override impact, BLEU and ROUGE-L"""
import collections
import re
import string
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np
from nltk.translate.bleu_score import SmoothingFunction
from nltk.translate.bleu_score import corpus_bleu as nltk_corpus_bleu
from nltk.translate.bleu_score import sentence_bleu
from sklearn.metrics import f1_score

from .datasets import GoldAnswer, Label

BLEU_WEIGHTS = (0.25, 0.25, 0.25, 0.25)

_ARTICLES = re.compile(r'\b(a|an|the)\b')
_PUNCTUATION = set(string.punctuation)
_BLEU_TOKENS = re.compile(r"\w+|[^\w\s]")
_SMOOTHING = SmoothingFunction()


class MetricException(ValueError):
    pass


def display(value, places=3):
    """Half-up rounding for tables, float noise below 1e-9 is absorbed first"""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(format(value, '.9f')).quantize(quantum, rounding=ROUND_HALF_UP))


def format_score(value, places=3):
    text = '{:.{}f}'.format(display(value, places), places)
    return text[1:] if text.startswith('0.') else text


@dataclass(frozen=True)
class DialectScore:
    dialect_id: str
    score: float
    n_examples: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise MetricException('Score {} for {} outside [0, 1]'.format(self.score, self.dialect_id))
        if self.n_examples < 1:
            raise MetricException('Dialect {} has no examples'.format(self.dialect_id))


@dataclass(frozen=True)
class DisparityReport:
    per_dialect: tuple
    avg: float
    avg_diff: float
    max_diff: float


@dataclass(frozen=True)
class OverrideStats:
    n_traces: int = 0
    n_overrides: int = 0
    override_rate: float = 0.0
    beneficial_rate: float = 0.0
    detrimental_rate: float = 0.0
    neutral_rate: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


def _is_relevant(label):
    return Label(label) == Label.Relevant


def classification_f1(predictions: Sequence, golds: Sequence) -> float:
    """F1 of the positive class Relevant, 0 when there is no true positive"""
    if len(predictions) != len(golds):
        raise MetricException('{} predictions for {} golds'.format(len(predictions), len(golds)))
    if not golds:
        raise MetricException('classification_f1 needs at least one example')
    y_true = [int(_is_relevant(label)) for label in golds]
    y_pred = [int(_is_relevant(label)) for label in predictions]
    return float(f1_score(y_true, y_pred, pos_label=1, average='binary', zero_division=0))


def normalize_answer(text) -> List[str]:
    """Lower, strip punctuation and articles, collapse whitespace, split"""
    text = (text or '').lower()
    text = ''.join(ch for ch in text if ch not in _PUNCTUATION)
    text = _ARTICLES.sub(' ', text)
    return text.split()


def _f1_tokens(prediction_tokens, reference_tokens):
    if not prediction_tokens or not reference_tokens:
        return float(prediction_tokens == reference_tokens)
    common = collections.Counter(prediction_tokens) & collections.Counter(reference_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(prediction_tokens)
    recall = overlap / len(reference_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction, references: Sequence[str]) -> float:
    """Best token-level F1 of `prediction` over the reference answers"""
    if not references:
        raise MetricException('token_f1 needs at least one reference')
    prediction_tokens = normalize_answer(prediction)
    return max(_f1_tokens(prediction_tokens, normalize_answer(reference)) for reference in references)


def disparity(per_dialect: Iterable[DialectScore]) -> DisparityReport:
    """AVG over all dialects, AVG Diff = mean absolute deviation from AVG, Max Diff = range"""
    per_dialect = tuple(per_dialect)
    if len(per_dialect) < 2:
        raise MetricException('disparity needs at least 2 dialects, got {}'.format(len(per_dialect)))
    scores = np.array([entry.score for entry in per_dialect], dtype=float)
    avg = float(scores.mean())
    return DisparityReport(
        per_dialect=per_dialect,
        avg=avg,
        avg_diff=float(np.abs(scores - avg).mean()),
        max_diff=float(scores.max() - scores.min()),
    )


def is_correct(value, gold: GoldAnswer):
    """Correctness of a final/initial value for override accounting (classification only)"""
    return Label(value) == gold.label


def _override_effect(initial, final, gold: GoldAnswer):
    """+1 beneficial, -1 detrimental, 0 neutral"""
    if gold.label is not None:
        before, after = is_correct(initial, gold), is_correct(final, gold)
        return int(after) - int(before)
    before, after = token_f1(initial, gold.spans), token_f1(final, gold.spans)
    if after > before:
        return 1
    if after < before:
        return -1
    return 0


def override_stats(traces, golds: Mapping[str, GoldAnswer]) -> OverrideStats:
    """Frequency of final != initial and the share of overrides that fixed, broke or kept correctness"""
    traces = list(traces)
    unmatched = sorted({trace.example_id for trace in traces if trace.example_id not in golds})
    if unmatched:
        raise MetricException('No gold for example id(s): {}'.format(', '.join(unmatched[:20])))
    effects = []
    for trace in traces:
        if trace.override:
            effects.append(_override_effect(trace.initial_verdict.value, trace.final_verdict.value,
                                            golds[trace.example_id]))
    n_traces, n_overrides = len(traces), len(effects)
    if not n_overrides:
        return OverrideStats(n_traces=n_traces)
    return OverrideStats(
        n_traces=n_traces,
        n_overrides=n_overrides,
        override_rate=n_overrides / n_traces,
        beneficial_rate=effects.count(1) / n_overrides,
        detrimental_rate=effects.count(-1) / n_overrides,
        neutral_rate=effects.count(0) / n_overrides,
    )


def override_stats_by_dialect(traces, golds) -> Dict[str, OverrideStats]:
    grouped = collections.defaultdict(list)
    for trace in traces:
        grouped[trace.dialect_id].append(trace)
    return {dialect_id: override_stats(group, golds) for dialect_id, group in grouped.items()}


def bleu_tokens(text):
    return _BLEU_TOKENS.findall((text or '').lower())


def _as_score(value):
    return 100.0 * float(value)


def bleu(candidate, references: Sequence[str]) -> float:
    """Sentence BLEU up to 4-grams, uniform weights, brevity penalty and
    add-one smoothing on the 2- to 4-gram precisions. Scale 0-100."""
    if not candidate or not references or not all(references):
        raise MetricException('bleu needs a candidate and non-empty references')
    return _as_score(sentence_bleu([bleu_tokens(reference) for reference in references], bleu_tokens(candidate),
                                   weights=BLEU_WEIGHTS, smoothing_function=_SMOOTHING.method2))


def corpus_bleu(candidates: Sequence[str], references_list: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU: n-gram counts and lengths summed before combining"""
    if not candidates or len(candidates) != len(references_list):
        raise MetricException('corpus_bleu needs aligned, non-empty candidates and references')
    return _as_score(nltk_corpus_bleu(
        [[bleu_tokens(reference) for reference in references] for references in references_list],
        [bleu_tokens(candidate) for candidate in candidates],
        weights=BLEU_WEIGHTS, smoothing_function=_SMOOTHING.method2))


def _lcs_length(left, right):
    previous = [0] * (len(right) + 1)
    for left_token in left:
        current = [0]
        for j, right_token in enumerate(right, 1):
            if left_token == right_token:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate, reference) -> float:
    """LCS F-measure over tokens, scale 0-100"""
    if not candidate or not reference:
        raise MetricException('rouge_l needs non-empty candidate and reference')
    candidate_tokens, reference_tokens = bleu_tokens(candidate), bleu_tokens(reference)
    lcs = _lcs_length(candidate_tokens, reference_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate_tokens)
    recall = lcs / len(reference_tokens)
    return 100.0 * 2 * precision * recall / (precision + recall)
