"""Prompt templates for the Dialect Agent and the Privacy Policy Agent"""
import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple

import yaml

# Implementation notes:
#
# - Builders are pure, equal inputs give byte-equal prompts. The response cache
#   keys on the rendered messages so any drift here invalidates cached runs.
# - Few-shot exemplars are alternating user/assistant pairs between the system
#   message and the final user message, the system text is the same in zero-
#   and few-shot mode. n shots always give 2 + 2n messages.
# - Slot names follow the agent prompt templates: dialect_info, question,
#   privacy_policy_segment, translated_question, classification, reasoning,
#   previous_classification, previous_reasoning, dialect_reasoning.

logger = logging.getLogger('dialectqa.prompts')

ROLES = ('system', 'user', 'assistant')
DEFAULT_SHOT_COUNT = 8
PLACEHOLDER = 'none given'

SLOT_NAMES = (
    'dialect_info', 'question', 'privacy_policy_segment', 'translated_question', 'classification',
    'reasoning', 'previous_classification', 'previous_reasoning', 'dialect_reasoning',
)


class TaskKind(str, enum.Enum):
    privacy_classification = 'privacy_classification'
    policy_extraction = 'policy_extraction'


class ShotKind(str, enum.Enum):
    privacy_classification = 'privacy_classification'
    policy_extraction = 'policy_extraction'
    translation = 'translation'
    evaluation = 'evaluation'


class PromptContractException(ValueError):
    pass


class FewShotException(Exception):
    pass


TRANSLATION_SYSTEM = (
    'You are an expert linguist specializing in the following dialect:\n'
    '\n'
    '{dialect_info}\n'
    '\n'
    'Your task is to translate the following question from this dialect into clear, Standard American '
    'English. Ensure that the translation is easily understandable to a general audience. Please provide '
    'only the translated question and do not include any additional text.'
)

TRANSLATION_USER = '{question}'

CLASSIFICATION_SYSTEM = (
    "You are a privacy policy expert. Your task is to determine whether the provided privacy policy "
    "segment is 'Relevant' or 'Irrelevant' to the question, based on the following definitions:\n"
    "\n"
    "Definitions:\n"
    "- Relevant: The policy segment directly addresses the question.\n"
    "- Irrelevant: The policy segment does not directly address the question.\n"
    "\n"
    "Please analyze the material below and provide:\n"
    "1. A brief explanation of your reasoning.\n"
    "2. Conclude only with 'Label: Relevant' or 'Label: Irrelevant'."
)

EXTRACTION_SYSTEM = (
    "You are a privacy policy expert. Review the provided policy segment and answer the following "
    "question in a concise manner, ensuring factual accuracy, based solely on the information in the "
    "policy segment.\n"
    "\n"
    "Please provide:\n"
    "1. The answer as a short, exact span quoted contiguously from the policy segment, on the first line.\n"
    "2. A brief rationale on a separate line starting with 'Rationale:'."
)

ANSWER_USER = (
    'Privacy Policy Segment:\n'
    '{privacy_policy_segment}\n'
    '\n'
    'Question:\n'
    '{translated_question}'
)

EVALUATION_SYSTEM = (
    "You are an expert linguist specializing in the following dialect, with expertise in privacy "
    "policies:\n"
    "\n"
    "{dialect_info}\n"
    "\n"
    "Previously, you translated a question from this dialect into Standard American English. Now, you "
    "need to critically assess whether the Privacy Policy Agent's classification accurately reflects the "
    "meaning of the original question in the dialect.\n"
    "\n"
    "Privacy Policy Segment:\n"
    "{privacy_policy_segment}\n"
    "\n"
    "Original Question in Dialect:\n"
    "{question}\n"
    "\n"
    "The Privacy Policy Agent has classified the policy segment as '{classification}' with the following "
    "reasoning:\n"
    "{reasoning}\n"
    "\n"
    "Based on your understanding of the dialect and its nuances, analyze the expert's classification and "
    "reasoning. Do you find any discrepancies or misunderstandings? Please provide a detailed explanation "
    "and conclude with either 'Agree' if you concur with the classification or 'Disagree' if you do not."
)

EVALUATION_USER = "Please evaluate the Privacy Policy Agent's classification."

RECONSIDER_CLASSIFICATION_SYSTEM = (
    "You are a privacy policy expert. Previously, you classified the privacy policy segment as "
    "'{previous_classification}' regarding the question, with the following reasoning:\n"
    "{previous_reasoning}\n"
    "\n"
    "However, the Dialect Agent has provided additional insights and disagrees with your classification. "
    "Their reasoning is as follows:\n"
    "{dialect_reasoning}\n"
    "\n"
    "Please reconsider your initial decision in light of this new information. Provide:\n"
    "1. A brief explanation of your reconsidered decision.\n"
    "2. Conclude with 'Final Label: Relevant' or 'Final Label: Irrelevant'."
)

RECONSIDER_EXTRACTION_SYSTEM = (
    "You are a privacy policy expert. Previously, you answered the question with "
    "'{previous_classification}', with the following reasoning:\n"
    "{previous_reasoning}\n"
    "\n"
    "However, the Dialect Agent has provided additional insights and disagrees with your answer. "
    "Their reasoning is as follows:\n"
    "{dialect_reasoning}\n"
    "\n"
    "You received feedback indicating that certain elements of the user's dialectal query were not fully "
    "addressed. Please revise your previous answer to incorporate the Dialect Agent's insights and ensure "
    "the user's intent is accurately captured. Provide:\n"
    "1. The revised answer as a short, exact span quoted contiguously from the policy segment, on the "
    "first line.\n"
    "2. A brief rationale on a separate line starting with 'Rationale:'."
)

RECONSIDER_USER = 'Please provide your reconsidered decision.'


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise PromptContractException('temperature must be >= 0')
        if int(self.max_tokens) != self.max_tokens or self.max_tokens < 1:
            raise PromptContractException('max_tokens must be a positive integer')


DEFAULT_DECODING = DecodingParams()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise PromptContractException('Unknown role {!r}'.format(self.role))
        if not self.content:
            raise PromptContractException('Empty {} message'.format(self.role))

    def to_wire(self):
        return {'role': self.role, 'content': self.content}


@dataclass(frozen=True)
class ChatPrompt:
    messages: Tuple[ChatMessage, ...]
    decoding: DecodingParams = DEFAULT_DECODING

    def __post_init__(self):
        object.__setattr__(self, 'messages', tuple(self.messages))
        if not self.messages or self.messages[0].role != 'system':
            raise PromptContractException('First message must have role system')
        if not any(message.role == 'user' for message in self.messages):
            raise PromptContractException('Prompt needs at least one user message')

    @property
    def system(self):
        return self.messages[0].content

    def to_wire(self):
        return [message.to_wire() for message in self.messages]


@dataclass(frozen=True)
class FewShotExample:
    task_kind: ShotKind
    input_block: str
    output_block: str

    def __post_init__(self):
        object.__setattr__(self, 'task_kind', ShotKind(self.task_kind))
        if not self.input_block or not self.output_block:
            raise FewShotException('Few-shot blocks must be non-empty')


def _require(**values):
    for name, value in values.items():
        if not isinstance(value, str) or not value.strip():
            raise PromptContractException('{} must be non-empty'.format(name))


def _assemble(system, user, shots, decoding):
    messages = [ChatMessage('system', system)]
    for shot in shots or ():
        messages.append(ChatMessage('user', shot.input_block))
        messages.append(ChatMessage('assistant', shot.output_block))
    messages.append(ChatMessage('user', user))
    return ChatPrompt(tuple(messages), decoding)


def build_translation_prompt(profile_text, question, shots=(), decoding=DEFAULT_DECODING) -> ChatPrompt:
    """Step 1: dialectal question -> Standard American English"""
    _require(profile_text=profile_text, question=question)
    return _assemble(TRANSLATION_SYSTEM.format(dialect_info=profile_text),
                     TRANSLATION_USER.format(question=question), shots, decoding)


def build_answer_prompt(task, segment, translated_question, shots=(), decoding=DEFAULT_DECODING) -> ChatPrompt:
    """Step 2a: initial label or answer span from the Privacy Policy Agent"""
    _require(segment=segment, translated_question=translated_question)
    system = CLASSIFICATION_SYSTEM if TaskKind(task) == TaskKind.privacy_classification else EXTRACTION_SYSTEM
    user = ANSWER_USER.format(privacy_policy_segment=segment, translated_question=translated_question)
    return _assemble(system, user, shots, decoding)


def build_evaluation_prompt(profile_text, segment, original_question, classification_or_answer, reasoning,
                            shots=(), decoding=DEFAULT_DECODING) -> ChatPrompt:
    """Step 2c: Dialect Agent audits the answer against the original dialectal question"""
    _require(profile_text=profile_text, segment=segment, original_question=original_question,
             classification_or_answer=classification_or_answer, reasoning=reasoning)
    system = EVALUATION_SYSTEM.format(
        dialect_info=profile_text,
        privacy_policy_segment=segment,
        question=original_question,
        classification=classification_or_answer,
        reasoning=reasoning,
    )
    return _assemble(system, EVALUATION_USER, shots, decoding)


def build_reconsideration_prompt(task, previous_output, previous_reasoning, dialect_reasoning,
                                 shots=(), decoding=DEFAULT_DECODING) -> ChatPrompt:
    """Step 2b: Privacy Policy Agent revises after a Disagree"""
    _require(previous_output=previous_output, previous_reasoning=previous_reasoning,
             dialect_reasoning=dialect_reasoning)
    if TaskKind(task) == TaskKind.privacy_classification:
        template = RECONSIDER_CLASSIFICATION_SYSTEM
    else:
        template = RECONSIDER_EXTRACTION_SYSTEM
    system = template.format(
        previous_classification=previous_output,
        previous_reasoning=previous_reasoning,
        dialect_reasoning=dialect_reasoning,
    )
    return _assemble(system, RECONSIDER_USER, shots, decoding)


def render_transcript(prompt: ChatPrompt) -> str:
    """Readable dump of a prompt, used for golden files and --dump-prompts"""
    parts = []
    for message in prompt.messages:
        parts.append('=== {}\n{}\n'.format(message.role, message.content))
    return ''.join(parts)


def load_few_shots(path) -> Tuple[FewShotExample, ...]:
    """Load a few-shot file: a YAML list of {task_kind, input_block, output_block}"""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding='utf-8')) or []
    except yaml.YAMLError as exc:
        raise FewShotException('Malformed few-shot file {}: {}'.format(path, exc)) from exc
    if not isinstance(data, list):
        raise FewShotException('Few-shot file {} must contain a list'.format(path))
    shots = []
    for idx, entry in enumerate(data):
        try:
            shots.append(FewShotExample(entry['task_kind'], entry['input_block'].strip(),
                                        entry['output_block'].strip()))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise FewShotException('Bad few-shot entry #{} in {}: {!r}'.format(idx, path, exc)) from exc
    logger.debug('Loaded {} few-shot exemplars from {}'.format(len(shots), path))
    return tuple(shots)


def select_shots(pool: Iterable[FewShotExample], kind, count: Optional[int]) -> Tuple[FewShotExample, ...]:
    """First `count` exemplars of `kind`, in file order"""
    kind = ShotKind(kind)
    matching = tuple(shot for shot in pool if shot.task_kind == kind)
    if not count:
        return ()
    if len(matching) < count:
        raise FewShotException('Need {} {} exemplars, found {}'.format(count, kind.value, len(matching)))
    return matching[:count]
