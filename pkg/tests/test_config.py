from pathlib import Path

import pytest
import yaml

from dialectqa.config import BackendSettings, ConfigException, load_run_settings, parse_run_settings
from dialectqa.prompts import TaskKind

MINIMAL = {
    'task': 'privacy_classification',
    'dataset': 'data/privacyqa.tsv',
    'dialect': 'indian',
    'profiles': 'data/dialects.yml',
    'backend': {'mode': 'replay', 'replay_file': 'replay.jsonl'},
}


def document(**overrides):
    result = dict(MINIMAL, **overrides)
    return {key: value for key, value in result.items() if value is not None}


def write(tmp_path, data, name='run.yml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding='utf-8')
    return path


def test_defaults():
    settings = parse_run_settings(document(), Path('/base'))
    assert settings.task == TaskKind.privacy_classification
    assert settings.pipeline == 'multi_agent'
    assert settings.mode == 'zero_shot'
    assert settings.profile_mode == 'full'
    assert settings.max_refinements == 2
    assert settings.workers == 4
    assert settings.backend.model == 'gpt-4o-mini'
    assert settings.backend.retry_backoff == (1.0, 2.0, 4.0)
    assert settings.decoding.temperature == 0.0


def test_relative_paths_follow_config_file(tmp_path):
    nested = tmp_path / 'configs'
    nested.mkdir()
    settings = load_run_settings(write(nested, document(variants='/abs/variants.jsonl')))
    assert settings.dataset == nested.resolve() / 'data' / 'privacyqa.tsv'
    assert settings.backend.replay_file == nested.resolve() / 'replay.jsonl'
    assert settings.variants == Path('/abs/variants.jsonl')
    assert settings.output_dir == nested.resolve() / 'runs'
    assert settings.source == nested / 'run.yml'


def test_unknown_key():
    with pytest.raises(ConfigException, match='temprature'):
        parse_run_settings(document(temprature=0.5))


def test_unknown_backend_key():
    with pytest.raises(ConfigException, match='backend: unknown key'):
        parse_run_settings(document(backend={'mode': 'replay', 'replay_file': 'r.jsonl', 'apikey': 'x'}))


@pytest.mark.parametrize('key', ['task', 'dataset', 'dialect', 'profiles', 'backend'])
def test_missing_key(key):
    with pytest.raises(ConfigException, match=key):
        parse_run_settings(document(**{key: None}))


@pytest.mark.parametrize('key,value', [
    ('task', 'sentiment'),
    ('pipeline', 'committee'),
    ('mode', 'one_shot'),
    ('profile_mode', 'none'),
    ('max_refinements', -1),
    ('workers', 0),
    ('shot_count', 'eight'),
    ('run_id', 'a/b'),
])
def test_bad_values(key, value):
    with pytest.raises(ConfigException):
        parse_run_settings(document(**{key: value}))


def test_few_shot_needs_file():
    with pytest.raises(ConfigException, match='few_shots'):
        parse_run_settings(document(mode='few_shot'))
    assert parse_run_settings(document(mode='few_shot', few_shots='fewshot.yml')).mode == 'few_shot'


def test_live_mode_needs_key(monkeypatch):
    monkeypatch.delenv('OPENAI_API_KEY', raising=False)
    with pytest.raises(ConfigException, match='OPENAI_API_KEY'):
        parse_run_settings(document(backend={'mode': 'live'}))
    settings = parse_run_settings(document(backend={'mode': 'live'}), check_env=False)
    assert settings.backend.api_key_env == 'OPENAI_API_KEY'
    monkeypatch.setenv('OPENAI_API_KEY', 'sk-test')
    assert parse_run_settings(document(backend={'mode': 'live'})).backend.mode == 'live'


def test_mode_specific_files():
    with pytest.raises(ConfigException, match='replay_file'):
        parse_run_settings(document(backend={'mode': 'replay'}))
    with pytest.raises(ConfigException, match='script_file'):
        parse_run_settings(document(backend={'mode': 'script'}))
    with pytest.raises(ConfigException, match='backend.mode'):
        parse_run_settings(document(backend={'mode': 'psychic'}))


def test_decoding_section():
    settings = parse_run_settings(document(decoding={'temperature': 0.7, 'max_tokens': 256}))
    assert (settings.decoding.temperature, settings.decoding.max_tokens) == (0.7, 256)
    with pytest.raises(ConfigException):
        parse_run_settings(document(decoding={'top_p': 0.9}))


def test_overrides(monkeypatch):
    settings = parse_run_settings(document())
    changed = settings.with_overrides(workers=8, pipeline='single_agent')
    assert (changed.workers, changed.pipeline) == (8, 'single_agent')
    assert settings.workers == 4
    with pytest.raises(ConfigException):
        settings.with_overrides(pipeline='committee')
    monkeypatch.delenv('OPENAI_API_KEY', raising=False)
    with pytest.raises(ConfigException):
        settings.with_overrides(backend_mode='live')
    assert settings.with_overrides(backend_mode='live', check_env=False).backend.mode == 'live'


def test_bad_files(tmp_path):
    with pytest.raises(ConfigException, match='Cannot read'):
        load_run_settings(tmp_path / 'missing.yml')
    broken = tmp_path / 'broken.yml'
    broken.write_text('task: [unclosed', encoding='utf-8')
    with pytest.raises(ConfigException, match='not valid YAML'):
        load_run_settings(broken)
    with pytest.raises(ConfigException, match='mapping'):
        load_run_settings(write(tmp_path, ['a', 'list'], 'list.yml'))


def test_api_key_is_not_stored(monkeypatch):
    monkeypatch.setenv('OPENAI_API_KEY', 'sk-very-secret')
    settings = parse_run_settings(document(backend={'mode': 'live'}))
    assert 'sk-very-secret' not in repr(settings)
    assert BackendSettings().api_key_env == 'OPENAI_API_KEY'
