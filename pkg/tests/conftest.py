"""Shared fixtures: bundled data, scripted model responders, run configs"""
import re
from pathlib import Path

import pytest
import yaml

from dialectqa.backend import ScriptedBackend
from dialectqa.datasets import load_privacyqa
from dialectqa.profiles import load_profiles

ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT / 'data'
GOLDEN_DIR = Path(__file__).resolve().parent / 'golden'

_TAG = re.compile(r'^(?P<example_id>.+):(?P<dialect_id>[^:]+):(?P<step>[a-z]+)(?P<round>\d+)$')


def parse_tag(request):
    """(example_id, dialect_id, step, round) of a request made by the orchestrator"""
    match = _TAG.match(request.request_tag)
    assert match, request.request_tag
    return match.group('example_id'), match.group('dialect_id'), match.group('step'), int(match.group('round'))


class StepScript:
    """Responder answering by protocol step.

    Each step maps to a string, a list indexed by round (last entry repeats)
    or a callable taking the request.
    """

    def __init__(self, **steps):
        self.steps = steps

    def __call__(self, request):
        _, _, step, round_no = parse_tag(request)
        reply = self.steps[step]
        if callable(reply):
            return reply(request)
        if isinstance(reply, (list, tuple)):
            return reply[min(round_no, len(reply)) - 1]
        return reply


def steps_of(backend):
    return [parse_tag(request)[2] for request in backend.requests]


@pytest.fixture
def registry():
    return load_profiles(DATA_DIR / 'dialects.yml')


@pytest.fixture
def sample_examples():
    return load_privacyqa(DATA_DIR / 'sample-privacyqa.tsv')


@pytest.fixture
def script():
    """Factory: script(**steps) -> ScriptedBackend"""
    def make(**steps):
        return ScriptedBackend(responder=StepScript(**steps))
    return make


AGREEING_STEPS = dict(
    translate=lambda request: request.prompt.messages[-1].content,
    answer='The segment addresses the question.\nLabel: Relevant',
    evaluate='The classification matches the intent.\nAgree',
    reconsider='Reconsidered.\nFinal Label: Relevant',
)


@pytest.fixture
def write_config(tmp_path):
    """Factory: write_config(**overrides) -> path of a run.yml using the sample data"""
    def make(**overrides):
        document = {
            'task': 'privacy_classification',
            'dataset': str(DATA_DIR / 'sample-privacyqa.tsv'),
            'dialect': 'raave',
            'variants': str(DATA_DIR / 'sample-variants-raave.jsonl'),
            'profiles': str(DATA_DIR / 'dialects.yml'),
            'few_shots': str(DATA_DIR / 'fewshot.yml'),
            'workers': 2,
            'output_dir': str(tmp_path / 'runs'),
            'backend': {'mode': 'script', 'script_file': str(tmp_path / 'script.jsonl'), 'model': 'test-model'},
        }
        backend = overrides.pop('backend', None)
        if backend:
            document['backend'].update(backend)
        document.update(overrides)
        document = {key: value for key, value in document.items() if value is not None}
        path = tmp_path / 'run.yml'
        path.write_text(yaml.safe_dump(document), encoding='utf-8')
        return path
    return make
