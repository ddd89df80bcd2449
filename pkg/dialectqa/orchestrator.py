"""Dialect Agent <-> Privacy Policy Agent protocol for one example"""
import enum
import logging
import re
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .backend import BackendException, CompletionRequest, cache_key
from .datasets import Label, QAExample
from .profiles import GENERIC_ID, render_profile
from .prompts import (DEFAULT_DECODING, DEFAULT_SHOT_COUNT, PLACEHOLDER, DecodingParams, ShotKind, TaskKind,
                      build_answer_prompt, build_evaluation_prompt, build_reconsideration_prompt,
                      build_translation_prompt, select_shots)

# Implementation notes:
#
# - Turn order: translate, answer, then (evaluate, reconsider) pairs, ending on an
#   evaluate that agreed or on the evaluate after the last allowed reconsideration.
#   `iterations` counts reconsiderations, capped at max_refinements (default 2).
# - max_refinements = 0 is a plain translate + answer pipeline, no evaluation.
# - Translation happens once per example, the Dialect Agent evaluates against the
#   ORIGINAL dialectal question.
# - Unparseable output never aborts a batch:
#   - evaluate -> treated as Agree
#   - answer / reconsider -> Irrelevant (classification) or empty span (extraction)
#   every fallback is listed in trace.parse_failures.

logger = logging.getLogger('dialectqa.orchestrator')

PIPELINES = ('multi_agent', 'single_agent', 'translate_only')
MODES = ('zero_shot', 'few_shot')
PROFILE_MODES = ('full', 'generic')
DEFAULT_MODEL = 'gpt-4o-mini'

_MARKERS = {
    'initial': re.compile(r'label\s*:', re.IGNORECASE),
    'final': re.compile(r'final\s+label\s*:', re.IGNORECASE),
}
_LABEL_TOKEN = re.compile(r'^[\s*_"\'`\[(]*([A-Za-z]+)')
_RATIONALE = re.compile(r'rationale\s*:', re.IGNORECASE)
_ANSWER_PREFIX = re.compile(r'^\s*(?:revised\s+|final\s+)?answer\s*:\s*', re.IGNORECASE)


class ParseFailure(ValueError):
    pass


class ExampleException(Exception):
    def __init__(self, example_id, step, cause):
        super().__init__('Example {} failed at {}: {}'.format(example_id, step, cause))
        self.example_id = example_id
        self.step = step


class Agreement(str, enum.Enum):
    Agree = 'Agree'
    Disagree = 'Disagree'


@dataclass(frozen=True)
class Verdict:
    """A label (classification) or an answer span (extraction) with its reasoning"""
    value: str
    reasoning: str = ''

    def to_dict(self):
        return {'value': self.value, 'reasoning': self.reasoning}

    @classmethod
    def from_dict(cls, data):
        return cls(data['value'], data.get('reasoning', ''))


@dataclass(frozen=True)
class AgreementResult:
    agreement: Agreement
    rationale: str


@dataclass(frozen=True)
class Turn:
    agent: str
    step: str
    prompt_digest: str
    raw_response: str
    parsed: str
    provenance: str = ''

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class RunConfig:
    task: TaskKind
    dialect_id: str
    model: str = DEFAULT_MODEL
    profile_mode: str = 'full'
    pipeline: str = 'multi_agent'
    mode: str = 'zero_shot'
    shot_count: int = DEFAULT_SHOT_COUNT
    max_refinements: int = 2
    decoding: DecodingParams = DEFAULT_DECODING
    few_shots: Tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'task', TaskKind(self.task))
        object.__setattr__(self, 'few_shots', tuple(self.few_shots))
        if self.profile_mode not in PROFILE_MODES:
            raise ValueError('profile_mode must be one of {}'.format(PROFILE_MODES))
        if self.pipeline not in PIPELINES:
            raise ValueError('pipeline must be one of {}'.format(PIPELINES))
        if self.mode not in MODES:
            raise ValueError('mode must be one of {}'.format(MODES))
        if self.shot_count < 0 or self.max_refinements < 0:
            raise ValueError('shot_count and max_refinements must be >= 0')

    def shots(self, kind):
        if self.mode != 'few_shot':
            return ()
        return select_shots(self.few_shots, kind, self.shot_count)

    def snapshot(self):
        return {
            'task': self.task.value,
            'dialect_id': self.dialect_id,
            'model': self.model,
            'profile_mode': self.profile_mode,
            'pipeline': self.pipeline,
            'mode': self.mode,
            'shot_count': self.shot_count,
            'max_refinements': self.max_refinements,
            'temperature': self.decoding.temperature,
            'max_tokens': self.decoding.max_tokens,
        }


@dataclass
class RefinementTrace:
    example_id: str
    dialect_id: str
    task: TaskKind
    mode: str
    pipeline: str = 'multi_agent'
    profile_mode: str = 'full'
    model: str = DEFAULT_MODEL
    max_refinements: int = 2
    translated_question: str = ''
    turns: List[Turn] = field(default_factory=list)
    initial_verdict: Optional[Verdict] = None
    final_verdict: Optional[Verdict] = None
    iterations: int = 0
    override: bool = False
    loop_exhausted: bool = False
    parse_failures: List[str] = field(default_factory=list)
    error: Optional[str] = None
    created_at: float = 0.0

    @property
    def failed(self):
        return self.error is not None

    def to_record(self):
        return {
            'example_id': self.example_id,
            'dialect_id': self.dialect_id,
            'task': TaskKind(self.task).value,
            'mode': self.mode,
            'pipeline': self.pipeline,
            'profile_mode': self.profile_mode,
            'model': self.model,
            'max_refinements': self.max_refinements,
            'translated_question': self.translated_question,
            'turns': [turn.to_dict() for turn in self.turns],
            'initial_verdict': self.initial_verdict.to_dict() if self.initial_verdict else None,
            'final_verdict': self.final_verdict.to_dict() if self.final_verdict else None,
            'iterations': self.iterations,
            'override': self.override,
            'loop_exhausted': self.loop_exhausted,
            'parse_failures': list(self.parse_failures),
            'error': self.error,
            'created_at': self.created_at,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            example_id=record['example_id'],
            dialect_id=record['dialect_id'],
            task=TaskKind(record['task']),
            mode=record['mode'],
            pipeline=record.get('pipeline', 'multi_agent'),
            profile_mode=record.get('profile_mode', 'full'),
            model=record.get('model', DEFAULT_MODEL),
            max_refinements=record.get('max_refinements', 2),
            translated_question=record.get('translated_question', ''),
            turns=[Turn(**turn) for turn in record.get('turns', [])],
            initial_verdict=Verdict.from_dict(record['initial_verdict']) if record.get('initial_verdict') else None,
            final_verdict=Verdict.from_dict(record['final_verdict']) if record.get('final_verdict') else None,
            iterations=record.get('iterations', 0),
            override=record.get('override', False),
            loop_exhausted=record.get('loop_exhausted', False),
            parse_failures=list(record.get('parse_failures', [])),
            error=record.get('error'),
            created_at=record.get('created_at', 0.0),
        )


def parse_verdict(text, task, stage='initial') -> Verdict:
    """Pull the label (last marker wins) or the answer span out of a Privacy Policy Agent reply"""
    text = text or ''
    if TaskKind(task) == TaskKind.privacy_classification:
        markers = list(_MARKERS[stage].finditer(text))
        if not markers:
            raise ParseFailure('No {!r} marker'.format('Final Label:' if stage == 'final' else 'Label:'))
        last = markers[-1]
        token = _LABEL_TOKEN.match(text[last.end():])
        try:
            label = Label.parse(token.group(1) if token else '')
        except ValueError as exc:
            raise ParseFailure(str(exc)) from exc
        return Verdict(label.value, text[:last.start()].strip())

    marker = _RATIONALE.search(text)
    if marker:
        answer, rationale = text[:marker.start()], text[marker.end():]
    else:
        answer, rationale = text, ''
    answer = _ANSWER_PREFIX.sub('', answer.strip(), count=1).strip()
    if not answer:
        raise ParseFailure('Empty answer span')
    return Verdict(answer, rationale.strip())


def parse_agreement(text) -> AgreementResult:
    """Agree/Disagree from the last non-empty line, Disagree checked first"""
    lines = [line for line in (text or '').splitlines() if line.strip()]
    if not lines:
        raise ParseFailure('Empty evaluation')
    last = lines[-1].lower()
    if 'disagree' in last:
        return AgreementResult(Agreement.Disagree, text.strip())
    if 'agree' in last:
        return AgreementResult(Agreement.Agree, text.strip())
    raise ParseFailure('No Agree/Disagree on the final line')


def fallback_verdict(task):
    if TaskKind(task) == TaskKind.privacy_classification:
        return Verdict(Label.Irrelevant.value, PLACEHOLDER)
    return Verdict('', PLACEHOLDER)


def _slot(text):
    return text if text and text.strip() else PLACEHOLDER


class _Exchange:
    """Sends prompts for one example and records every call as a turn"""

    def __init__(self, example, cfg, backend, trace):
        self.example = example
        self.cfg = cfg
        self.backend = backend
        self.trace = trace
        self.rounds = {}

    def send(self, step, prompt):
        self.rounds[step] = self.rounds.get(step, 0) + 1
        request = CompletionRequest(self.cfg.model, prompt, '{}:{}:{}{}'.format(
            self.example.example_id, self.example.dialect_id, step, self.rounds[step]))
        try:
            completion = self.backend.complete(request)
        except BackendException as exc:
            raise ExampleException(self.example.example_id, step, exc) from exc
        logger.debug('{} -> {!r}'.format(request.request_tag, completion.content[:80]))
        return cache_key(request), completion

    def record(self, agent, step, digest, completion, parsed):
        self.trace.turns.append(Turn(agent, step, digest, completion.content, parsed, completion.provenance))

    def verdict(self, step, prompt, stage):
        digest, completion = self.send(step, prompt)
        try:
            verdict = parse_verdict(completion.content, self.cfg.task, stage)
        except ParseFailure as exc:
            logger.warning('Unparseable {} for {}: {}'.format(step, self.example.example_id, exc))
            self.trace.parse_failures.append(step)
            verdict = fallback_verdict(self.cfg.task)
        self.record('privacy', step, digest, completion, verdict.value)
        return verdict

    def translate(self, profile_text):
        prompt = build_translation_prompt(profile_text, self.example.question,
                                          self.cfg.shots(ShotKind.translation), self.cfg.decoding)
        digest, completion = self.send('translate', prompt)
        translated = completion.content.strip()
        if not translated:
            self.trace.parse_failures.append('translate')
            translated = self.example.question
        self.record('dialect', 'translate', digest, completion, translated)
        return translated


def _new_trace(example, cfg, pipeline):
    return RefinementTrace(
        example_id=example.example_id,
        dialect_id=example.dialect_id,
        task=cfg.task,
        mode=cfg.mode,
        pipeline=pipeline,
        profile_mode=cfg.profile_mode,
        model=cfg.model,
        max_refinements=cfg.max_refinements,
        created_at=time.time(),
    )


def _profile_text(cfg, registry, dialect_id):
    return render_profile(registry.get(GENERIC_ID if cfg.profile_mode == 'generic' else dialect_id))


def translate_example(example: QAExample, cfg: RunConfig, registry, backend) -> RefinementTrace:
    """Step 1 only, for translation quality scoring"""
    trace = _new_trace(example, cfg, 'translate_only')
    exchange = _Exchange(example, cfg, backend, trace)
    trace.translated_question = exchange.translate(_profile_text(cfg, registry, example.dialect_id))
    return trace


def run_example(example: QAExample, cfg: RunConfig, registry, backend) -> RefinementTrace:
    """Run the full protocol for one example and return its trace"""
    if cfg.pipeline == 'translate_only':
        return translate_example(example, cfg, registry, backend)
    trace = _new_trace(example, cfg, cfg.pipeline)
    exchange = _Exchange(example, cfg, backend, trace)
    answer_shots = cfg.shots(ShotKind(cfg.task.value))

    if cfg.pipeline == 'single_agent':
        prompt = build_answer_prompt(cfg.task, example.segment, example.question, answer_shots, cfg.decoding)
        trace.initial_verdict = trace.final_verdict = exchange.verdict('answer', prompt, 'initial')
        return trace

    profile_text = _profile_text(cfg, registry, example.dialect_id)
    trace.translated_question = exchange.translate(profile_text)

    prompt = build_answer_prompt(cfg.task, example.segment, trace.translated_question, answer_shots, cfg.decoding)
    current = trace.initial_verdict = exchange.verdict('answer', prompt, 'initial')

    if cfg.max_refinements > 0:
        evaluation_shots = cfg.shots(ShotKind.evaluation)
        while True:
            prompt = build_evaluation_prompt(profile_text, example.segment, example.question,
                                             _slot(current.value), _slot(current.reasoning),
                                             evaluation_shots, cfg.decoding)
            digest, completion = exchange.send('evaluate', prompt)
            try:
                result = parse_agreement(completion.content)
            except ParseFailure as exc:
                logger.warning('Unparseable evaluation for {}: {}'.format(example.example_id, exc))
                trace.parse_failures.append('evaluate')
                result = AgreementResult(Agreement.Agree, completion.content.strip())
            exchange.record('dialect', 'evaluate', digest, completion, result.agreement.value)

            if result.agreement == Agreement.Agree:
                break
            if trace.iterations >= cfg.max_refinements:
                trace.loop_exhausted = True
                break
            prompt = build_reconsideration_prompt(cfg.task, _slot(current.value), _slot(current.reasoning),
                                                  _slot(result.rationale), answer_shots, cfg.decoding)
            current = exchange.verdict('reconsider', prompt, 'final')
            trace.iterations += 1

    trace.final_verdict = current
    trace.override = trace.final_verdict.value != trace.initial_verdict.value
    return trace
