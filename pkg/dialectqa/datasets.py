"""PrivacyQA / PolicyQA loaders and dialect variant pairing"""
import csv
import enum
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .prompts import TaskKind

# File contracts:
#
# - PrivacyQA: UTF-8 TSV with header `example_id question segment label`, one row
#   per (question, candidate sentence), label Relevant or Irrelevant.
# - PolicyQA: SQuAD v1 structure, data -> paragraphs -> context + qas -> answers[].text
# - Dialect variants: JSON lines {"example_id": ..., "question": ...}

logger = logging.getLogger('dialectqa.datasets')

SAE_ID = 'sae'
PRIVACYQA_COLUMNS = ('example_id', 'question', 'segment', 'label')


class Label(str, enum.Enum):
    Relevant = 'Relevant'
    Irrelevant = 'Irrelevant'

    @classmethod
    def parse(cls, token):
        """Case-insensitive label lookup, raises ValueError on anything else"""
        normalized = (token or '').strip().lower()
        for label in cls:
            if label.value.lower() == normalized:
                return label
        raise ValueError('Unknown label {!r}'.format(token))


class DatasetException(Exception):
    pass


class CoverageException(DatasetException):
    def __init__(self, message, missing_ids):
        super().__init__(message)
        self.missing_ids = list(missing_ids)


@dataclass(frozen=True)
class GoldAnswer:
    label: Optional[Label] = None
    spans: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'spans', tuple(self.spans))
        if (self.label is None) == (not self.spans):
            raise DatasetException('GoldAnswer needs exactly one of label or spans')
        if self.label is not None:
            object.__setattr__(self, 'label', Label(self.label))

    @property
    def task(self):
        return TaskKind.privacy_classification if self.label is not None else TaskKind.policy_extraction


@dataclass(frozen=True)
class QAExample:
    example_id: str
    task: TaskKind
    question: str
    segment: str
    gold: GoldAnswer
    dialect_id: str = SAE_ID
    sae_reference_question: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'task', TaskKind(self.task))
        if not self.question.strip() or not self.segment.strip():
            raise DatasetException('Example {} has an empty question or segment'.format(self.example_id))
        if self.gold.task != self.task:
            raise DatasetException('Example {} gold does not match task {}'.format(self.example_id, self.task))


def load_privacyqa(path) -> List[QAExample]:
    """One example per TSV row, labels mapped onto Relevant / Irrelevant"""
    examples = []
    with open(path, encoding='utf-8', newline='') as source:
        reader = csv.DictReader(source, delimiter='\t', quoting=csv.QUOTE_NONE)
        missing = [column for column in PRIVACYQA_COLUMNS if column not in (reader.fieldnames or ())]
        if missing:
            raise DatasetException('{}: missing column(s) {}'.format(path, ', '.join(missing)))
        for row in reader:
            where = '{}: row {}'.format(path, reader.line_num)
            try:
                label = Label.parse(row['label'])
            except ValueError as exc:
                raise DatasetException('{}: {}'.format(where, exc)) from exc
            question, segment = (row['question'] or '').strip(), (row['segment'] or '').strip()
            if not question or not segment:
                raise DatasetException('{}: empty question or segment'.format(where))
            examples.append(QAExample(
                example_id=row['example_id'],
                task=TaskKind.privacy_classification,
                question=question,
                segment=segment,
                gold=GoldAnswer(label=label),
            ))
    logger.info('Loaded {} PrivacyQA rows from {}'.format(len(examples), path))
    return examples


def write_privacyqa(examples, path):
    rows = ['\t'.join(PRIVACYQA_COLUMNS)]
    for example in examples:
        fields = [example.example_id, example.sae_reference_question or example.question,
                  example.segment, example.gold.label.value]
        if any('\t' in value or '\n' in value for value in fields):
            raise DatasetException('Example {} has a tab or newline, not representable in TSV'.format(
                example.example_id))
        rows.append('\t'.join(fields))
    Path(path).write_text('\n'.join(rows) + '\n', encoding='utf-8')


def _expect(container, key, kind, where):
    value = container.get(key) if isinstance(container, dict) else None
    if not isinstance(value, kind):
        raise DatasetException('{}.{}: expected {}'.format(where, key, kind.__name__))
    return value


def load_policyqa(path) -> List[QAExample]:
    """One example per question, every reference answer text kept as a span"""
    try:
        document = json.loads(Path(path).read_text(encoding='utf-8'))
    except ValueError as exc:
        raise DatasetException('{}: not valid JSON ({})'.format(path, exc)) from exc

    examples = []
    for a_idx, article in enumerate(_expect(document, 'data', list, '$')):
        a_where = '$.data[{}]'.format(a_idx)
        for p_idx, paragraph in enumerate(_expect(article, 'paragraphs', list, a_where)):
            p_where = '{}.paragraphs[{}]'.format(a_where, p_idx)
            context = _expect(paragraph, 'context', str, p_where)
            for q_idx, qa in enumerate(_expect(paragraph, 'qas', list, p_where)):
                q_where = '{}.qas[{}]'.format(p_where, q_idx)
                example_id = _expect(qa, 'id', str, q_where)
                question = _expect(qa, 'question', str, q_where)
                answers = _expect(qa, 'answers', list, q_where)
                if not answers:
                    raise DatasetException('{}.answers: empty answer list'.format(q_where))
                spans = tuple(_expect(answer, 'text', str, '{}.answers[{}]'.format(q_where, idx))
                              for idx, answer in enumerate(answers))
                if not question.strip() or not context.strip():
                    raise DatasetException('{}: empty question or context'.format(q_where))
                examples.append(QAExample(
                    example_id=example_id,
                    task=TaskKind.policy_extraction,
                    question=question,
                    segment=context,
                    gold=GoldAnswer(spans=spans),
                ))
    logger.info('Loaded {} PolicyQA questions from {}'.format(len(examples), path))
    return examples


def write_policyqa(examples, path):
    """Write examples back as SQuAD v1, one paragraph per distinct context"""
    paragraphs: Dict[str, list] = {}
    for example in examples:
        paragraphs.setdefault(example.segment, []).append({
            'id': example.example_id,
            'question': example.sae_reference_question or example.question,
            'answers': [{'text': span} for span in example.gold.spans],
        })
    document = {'data': [{'paragraphs': [{'context': context, 'qas': qas}
                                         for context, qas in paragraphs.items()]}]}
    Path(path).write_text(json.dumps(document, ensure_ascii=False, indent=1), encoding='utf-8')


def load_examples(task, path) -> List[QAExample]:
    if TaskKind(task) == TaskKind.privacy_classification:
        return load_privacyqa(path)
    return load_policyqa(path)


def load_variants(variant_path) -> Dict[str, str]:
    variants = {}
    with open(variant_path, encoding='utf-8') as source:
        for line_no, line in enumerate(source, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                example_id, question = record['example_id'], record['question']
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetException('{}: line {}: bad variant record'.format(variant_path, line_no)) from exc
            if example_id in variants:
                raise DatasetException('{}: line {}: duplicate example_id {}'.format(
                    variant_path, line_no, example_id))
            if not isinstance(question, str) or not question.strip():
                raise DatasetException('{}: line {}: empty question'.format(variant_path, line_no))
            variants[example_id] = question
    return variants


def write_variants(examples, path):
    with open(path, 'w', encoding='utf-8') as target:
        for example in examples:
            target.write(json.dumps({'example_id': example.example_id, 'question': example.question},
                                    ensure_ascii=False) + '\n')


def attach_dialect_variants(examples, variant_path, dialect_id) -> List[QAExample]:
    """Swap in dialectal questions, keeping the SAE question as translation reference.
    A `variant_path` of None is the identity mapping."""
    variants = load_variants(variant_path) if variant_path is not None else None
    if variants is not None:
        missing = [example.example_id for example in examples if example.example_id not in variants]
        if missing:
            raise CoverageException('{} lacks {} example id(s): {}'.format(
                variant_path, len(missing), ', '.join(missing[:20])), missing)
    paired = []
    for example in examples:
        sae_question = example.sae_reference_question or example.question
        question = variants[example.example_id] if variants is not None else sae_question
        paired.append(replace(example, question=question, sae_reference_question=sae_question,
                              dialect_id=dialect_id))
    logger.debug('Attached {} variants for dialect {}'.format(len(paired), dialect_id))
    return paired
