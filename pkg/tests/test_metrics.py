import collections
import math
import random

import pytest

from dialectqa.datasets import GoldAnswer, Label
from dialectqa.metrics import (DialectScore, MetricException, bleu, classification_f1, corpus_bleu, disparity,
                               display, format_score, normalize_answer, override_stats, override_stats_by_dialect,
                               rouge_l, token_f1)
from dialectqa.orchestrator import RefinementTrace, Verdict
from dialectqa.prompts import TaskKind

R, I = 'Relevant', 'Irrelevant'

TABLE_ROWS = [
    ([.394, .344, .332, .329, .312, .301], (.335, .022, .093)),
    ([.352, .343, .332, .338, .331, .323], (.337, .008, .029)),
]


def scores(values):
    return [DialectScore('d{}'.format(idx), value, 100) for idx, value in enumerate(values)]


@pytest.mark.parametrize('values, expected', TABLE_ROWS)
def test_disparity_rows(values, expected):
    report = disparity(scores(values))
    assert (display(report.avg), display(report.avg_diff), display(report.max_diff)) == expected


def test_disparity_equal_scores():
    report = disparity(scores([.5, .5, .5]))
    assert report.avg_diff == 0 and report.max_diff == 0


def test_disparity_properties():
    rng = random.Random(7)
    for _ in range(50):
        values = [rng.random() for _ in range(rng.randint(2, 8))]
        report = disparity(scores(values))
        assert report.max_diff == pytest.approx(max(values) - min(values))
        assert report.avg_diff <= report.max_diff + 1e-12
        assert min(values) <= report.avg <= max(values)
        shuffled = values[:]
        rng.shuffle(shuffled)
        assert disparity(scores(shuffled)).avg_diff == pytest.approx(report.avg_diff)
        padded = disparity(scores(values + [report.avg]))
        assert padded.max_diff == pytest.approx(report.max_diff)
        assert padded.avg_diff <= report.avg_diff + 1e-12


def test_disparity_needs_two():
    with pytest.raises(MetricException):
        disparity(scores([.3]))


def test_dialect_score_bounds():
    with pytest.raises(MetricException):
        DialectScore('sae', 1.2, 3)
    with pytest.raises(MetricException):
        DialectScore('sae', .5, 0)


def test_display_rounds_half_up():
    assert display(.3365) == .337
    assert display(.0225) == .023
    assert display(.1234) == .123
    assert format_score(.335333) == '.335'
    assert format_score(1.0) == '1.000'


# classification_f1

def test_f1_identity():
    assert classification_f1([R, R, R], [R, R, R]) == 1.0


def test_f1_no_true_positive():
    assert classification_f1([I, I, I], [R, I, I]) == 0.0


def test_f1_hand_computed():
    preds = [R, R, R, R, I, I, I]
    golds = [R, R, R, I, R, R, I]
    assert classification_f1(preds, golds) == pytest.approx(2 * .75 * .6 / 1.35)


def test_f1_length_mismatch():
    with pytest.raises(MetricException):
        classification_f1([R], [R, I])


def brute_force_f1(preds, golds):
    counts = collections.Counter(zip(preds, golds))
    tp, fp, fn = counts[(R, R)], counts[(R, I)], counts[(I, R)]
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def test_f1_matches_confusion_matrix():
    rng = random.Random(2024)
    for _ in range(100):
        size = rng.randint(1, 50)
        preds = [rng.choice((R, I)) for _ in range(size)]
        golds = [rng.choice((R, I)) for _ in range(size)]
        assert classification_f1(preds, golds) == pytest.approx(brute_force_f1(preds, golds), abs=1e-12)


def test_f1_accepts_label_enum():
    assert classification_f1([Label.Relevant], [Label.Relevant]) == 1.0


# normalize_answer / token_f1

def test_normalize_answer():
    assert normalize_answer("The App's data!") == ['apps', 'data']
    assert normalize_answer('') == []
    assert normalize_answer('We do not sell your personal information.') == \
        ['we', 'do', 'not', 'sell', 'your', 'personal', 'information']


TOKEN_F1_CASES = [
    ('we do not sell', ['we do not sell your data'], 0.8),
    ('We do not sell.', ['we do not sell'], 1.0),
    ('', ['we do not sell'], 0.0),
    ('we do not sell', [''], 0.0),
    ('', [''], 1.0),
    ('the', ['a'], 1.0),
    ('your name and address', ['We do not give that business your name and address.'], 2 * 1 * .4 / 1.4),
    ('cookies', ['we use cookies'], 2 * 1 * (1 / 3) / (1 + 1 / 3)),
    ('data data', ['data'], 2 * .5 * 1 / 1.5),
    ('servers in Ohio', ['servers located in the United States', 'Ohio'], 2 * (2 / 3) * .4 / (2 / 3 + .4)),
    ('Ohio', ['servers located in the United States', 'Ohio'], 1.0),
    ('nothing shared', ['we share data'], 0.0),
]


@pytest.mark.parametrize('prediction, references, expected', TOKEN_F1_CASES)
def test_token_f1(prediction, references, expected):
    assert token_f1(prediction, references) == pytest.approx(expected)


def test_token_f1_symmetric_and_monotone():
    rng = random.Random(11)
    vocabulary = 'we do not sell share your data with partners cookies'.split()
    for _ in range(50):
        left = ' '.join(rng.choice(vocabulary) for _ in range(rng.randint(1, 6)))
        right = ' '.join(rng.choice(vocabulary) for _ in range(rng.randint(1, 6)))
        extra = ' '.join(rng.choice(vocabulary) for _ in range(rng.randint(1, 6)))
        assert token_f1(left, [right]) == pytest.approx(token_f1(right, [left]))
        assert 0.0 <= token_f1(left, [right]) <= 1.0
        assert token_f1(left, [right, extra]) >= token_f1(left, [right])


def test_token_f1_needs_references():
    with pytest.raises(MetricException):
        token_f1('x', [])


# override_stats

def trace(example_id, initial, final, dialect_id='sae'):
    return RefinementTrace(example_id, dialect_id, TaskKind.privacy_classification, 'zero_shot',
                           initial_verdict=Verdict(initial), final_verdict=Verdict(final),
                           override=initial != final)


GOLDS = {'a': GoldAnswer(label=Label.Relevant), 'b': GoldAnswer(label=Label.Relevant),
         'c': GoldAnswer(label=Label.Irrelevant), 'd': GoldAnswer(label=Label.Irrelevant)}


def test_no_overrides():
    stats = override_stats([trace('a', R, R), trace('c', I, I)], GOLDS)
    assert stats.override_rate == 0 and stats.n_overrides == 0 and stats.n_traces == 2
    assert stats.beneficial_rate == stats.detrimental_rate == stats.neutral_rate == 0


def test_one_fixed_one_broken():
    stats = override_stats([trace('a', I, R), trace('c', I, R), trace('b', R, R), trace('d', I, I)], GOLDS)
    assert stats.override_rate == .5
    assert stats.beneficial_rate == .5
    assert stats.detrimental_rate == .5
    assert stats.neutral_rate == 0


def test_override_table_shape():
    """87 traces, 20 overrides: 13 fixed, 5 broken, 2 neutral -> 22.99% / 65% / 25% / 10%"""
    golds, traces = {}, []
    for idx in range(87):
        example_id = 'x{}'.format(idx)
        golds[example_id] = GoldAnswer(label=Label.Relevant)
        if idx < 13:
            traces.append(trace(example_id, I, R))
        elif idx < 18:
            traces.append(trace(example_id, R, I))
        elif idx < 20:
            golds[example_id] = GoldAnswer(spans=('n/a',))
            traces.append(trace(example_id, 'partner business', 'business partner'))
        else:
            traces.append(trace(example_id, R, R))
    stats = override_stats(traces, golds)
    assert format_score(stats.override_rate) == '.230'
    assert stats.beneficial_rate == pytest.approx(.65)
    assert stats.detrimental_rate == pytest.approx(.25)
    assert stats.beneficial_rate + stats.detrimental_rate + stats.neutral_rate == pytest.approx(1.0)


def test_extraction_override_by_token_f1():
    golds = {'p': GoldAnswer(spans=('your name and address',))}
    better = RefinementTrace('p', 'sae', TaskKind.policy_extraction, 'zero_shot',
                             initial_verdict=Verdict('partner business'),
                             final_verdict=Verdict('name and address'), override=True)
    assert override_stats([better], golds).beneficial_rate == 1.0


def test_override_unknown_example():
    with pytest.raises(MetricException):
        override_stats([trace('zz', R, I)], GOLDS)


def test_override_by_dialect():
    stats = override_stats_by_dialect([trace('a', I, R, 'raave'), trace('b', R, R, 'raave'),
                                       trace('a', R, R, 'welsh')], GOLDS)
    assert stats['raave'].override_rate == .5
    assert stats['welsh'].override_rate == 0


# BLEU / ROUGE-L, checked against a plain loop-and-dict implementation

def oracle_tokens(text):
    tokens, word = [], ''
    for char in text.lower():
        if char.isalnum() or char == '_':
            word += char
            continue
        if word:
            tokens.append(word)
            word = ''
        if not char.isspace():
            tokens.append(char)
    if word:
        tokens.append(word)
    return tokens


def oracle_bleu(candidate, reference):
    cand, ref = oracle_tokens(candidate), oracle_tokens(reference)
    logs = []
    for n in range(1, 5):
        cand_grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        ref_counts = {}
        for gram in (tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)):
            ref_counts[gram] = ref_counts.get(gram, 0) + 1
        used, matches = {}, 0
        for gram in cand_grams:
            if used.get(gram, 0) < ref_counts.get(gram, 0):
                used[gram] = used.get(gram, 0) + 1
                matches += 1
        # a candidate shorter than n still counts one n-gram slot
        total = max(1, len(cand_grams))
        if n == 1:
            if matches == 0:
                return 0.0
            logs.append(math.log(matches / total))
        else:
            logs.append(math.log((matches + 1) / (total + 1)))
    penalty = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return 100 * penalty * math.exp(sum(logs) / 4)


def oracle_rouge_l(candidate, reference):
    cand, ref = oracle_tokens(candidate), oracle_tokens(reference)
    table = [[0] * (len(ref) + 1) for _ in range(len(cand) + 1)]
    for i in range(1, len(cand) + 1):
        for j in range(1, len(ref) + 1):
            if cand[i - 1] == ref[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    lcs = table[-1][-1]
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return 100 * 2 * precision * recall / (precision + recall)


SENTENCE_PAIRS = [
    ('Who is going to have access to my information?', 'Who is going to have access to my information?'),
    ('Who has access to my information?', 'Who is going to have access to my information?'),
    ('Will my test results be shared with third parties?', 'Will my test results be shared with any third-party?'),
    ('What information do collaborators have access to?', 'What information do the collaborators have access to?'),
    ('What information does the app sell to others?', 'What information, if any, does that app sell to others?'),
    ('Does the app need special permissions to run?', 'Does the app need any special permissions to run?'),
    ('Is my location tracked when I do not use the app?', 'Is my location tracked when I am not using the app?'),
    ('Where is my data kept and for how long?', 'Where is my data stored, and how long is it kept?'),
    ('Will they delete my account if I ask?', 'Will they delete my account details if I ask them to?'),
    ('Is my data sold to advertisers?', 'Will my data be sold to advertisers?'),
    ('Can I opt out of emails?', 'Can I stop getting promotional emails?'),
    ('Why are cookies used?', 'Why does the site use cookies?'),
    ('Will I be told about policy changes?', 'Will I be told if the policy changes?'),
    ('Does the policy mention children?', 'Does the privacy policy mention anything about children?'),
    ('How long is data kept after deletion?', 'How long is my data kept after I delete my account?'),
    ('Is my information shared?', 'Is my information shared with others?'),
    ('What is collected when browsing?', 'What information is collected when I browse the site?'),
    ('Where is data stored?', 'Where is my data stored?'),
    ('the cat sat', 'the cat sat down'),
    ('completely different words here', 'Will my data be sold to advertisers?'),
]


@pytest.mark.parametrize('candidate, reference', SENTENCE_PAIRS)
def test_bleu_matches_oracle(candidate, reference):
    assert bleu(candidate, [reference]) == pytest.approx(oracle_bleu(candidate, reference), abs=1e-6)


@pytest.mark.parametrize('candidate, reference', SENTENCE_PAIRS)
def test_rouge_l_matches_oracle(candidate, reference):
    assert rouge_l(candidate, reference) == pytest.approx(oracle_rouge_l(candidate, reference), abs=1e-6)


def test_bleu_fixed_points():
    assert bleu('Will my data be sold?', ['Will my data be sold?']) == pytest.approx(100.0)
    assert bleu('alpha beta', ['gamma delta']) == 0.0
    assert bleu('the cat sat', ['the cat sat down']) == pytest.approx(100 * math.exp(1 - 4 / 3) * .5 ** .25)


def test_bleu_picks_closest_reference_length():
    single = bleu('the cat sat', ['the cat sat'])
    assert bleu('the cat sat', ['the cat sat down on the mat', 'the cat sat']) == pytest.approx(single)


def test_bleu_empty_inputs():
    with pytest.raises(MetricException):
        bleu('', ['x'])
    with pytest.raises(MetricException):
        bleu('x', [])


def test_corpus_bleu_single_pair_equals_sentence():
    candidate, reference = SENTENCE_PAIRS[2]
    assert corpus_bleu([candidate], [[reference]]) == pytest.approx(bleu(candidate, [reference]))


def test_corpus_bleu_identity():
    pairs = SENTENCE_PAIRS[:5]
    assert corpus_bleu([ref for _, ref in pairs], [[ref] for _, ref in pairs]) == pytest.approx(100.0)


def test_rouge_l_fixed_points():
    assert rouge_l('a b c d', 'a x c') == pytest.approx(57.142857, abs=1e-5)
    assert rouge_l('same words', 'same words') == pytest.approx(100.0)
    assert rouge_l('alpha', 'beta') == 0.0
    with pytest.raises(MetricException):
        rouge_l('', 'x')
