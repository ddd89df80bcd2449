"""Run configuration: YAML document -> RunSettings"""
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .orchestrator import MODES, PIPELINES, PROFILE_MODES
from .prompts import DEFAULT_SHOT_COUNT, DecodingParams, TaskKind

# Implementation notes:
#
# - Every validation happens here, before any backend is built, so a bad config
#   never costs a request.
# - Relative paths are resolved against the directory of the config file.
# - The api key itself is never read into settings, only the name of the
#   environment variable holding it.

logger = logging.getLogger('dialectqa.config')

BACKEND_MODES = ('live', 'record', 'replay', 'script')

_TOP_KEYS = {
    'task', 'dataset', 'dialect', 'variants', 'profiles', 'profile_mode', 'pipeline', 'mode', 'shot_count',
    'few_shots', 'max_refinements', 'workers', 'output_dir', 'run_id', 'backend', 'decoding',
}
_REQUIRED_KEYS = ('task', 'dataset', 'dialect', 'profiles', 'backend')
_BACKEND_KEYS = {
    'mode', 'base_url', 'model', 'api_key_env', 'timeout', 'max_retries', 'retry_backoff', 'max_in_flight',
    'cache_dir', 'replay_file', 'script_file',
}
_DECODING_KEYS = {'temperature', 'max_tokens'}


class ConfigException(Exception):
    pass


@dataclass(frozen=True)
class BackendSettings:
    mode: str = 'live'
    base_url: str = 'https://api.openai.com/v1'
    model: str = 'gpt-4o-mini'
    api_key_env: Optional[str] = 'OPENAI_API_KEY'
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: Tuple[float, ...] = (1.0, 2.0, 4.0)
    max_in_flight: int = 4
    cache_dir: Optional[Path] = None
    replay_file: Optional[Path] = None
    script_file: Optional[Path] = None


@dataclass(frozen=True)
class RunSettings:
    task: TaskKind
    dataset: Path
    dialect: str
    profiles: Path
    backend: BackendSettings
    variants: Optional[Path] = None
    profile_mode: str = 'full'
    pipeline: str = 'multi_agent'
    mode: str = 'zero_shot'
    shot_count: int = DEFAULT_SHOT_COUNT
    few_shots: Optional[Path] = None
    max_refinements: int = 2
    workers: int = 4
    output_dir: Path = Path('runs')
    run_id: Optional[str] = None
    decoding: DecodingParams = field(default_factory=DecodingParams)
    source: Optional[Path] = None

    def with_overrides(self, backend_mode=None, workers=None, pipeline=None, check_env=True):
        """Apply command line overrides, re-checking what they touch"""
        settings = self
        if backend_mode:
            settings = replace(settings, backend=replace(settings.backend, mode=backend_mode))
        if workers:
            settings = replace(settings, workers=workers)
        if pipeline:
            settings = replace(settings, pipeline=_choice(pipeline, PIPELINES, 'pipeline'))
        if check_env:
            _check_backend(settings.backend, 'command line')
        if settings.workers < 1:
            raise ConfigException('workers must be >= 1')
        return settings


def _choice(value, choices, key):
    if value not in choices:
        raise ConfigException('{}: {!r} is not one of {}'.format(key, value, ', '.join(choices)))
    return value


def _count(value, key, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigException('{}: expected an integer >= {}, got {!r}'.format(key, minimum, value))
    return value


def _number(value, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
        raise ConfigException('{}: expected a non-negative number, got {!r}'.format(key, value))
    return float(value)


def _unknown(section, allowed, where):
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigException('{}: unknown key(s) {}'.format(where, ', '.join(extra)))


def _check_backend(backend: BackendSettings, where):
    _choice(backend.mode, BACKEND_MODES, 'backend.mode')
    if backend.mode in ('live', 'record'):
        if not backend.api_key_env:
            raise ConfigException('backend.api_key_env is required in {} mode ({})'.format(backend.mode, where))
        if not os.environ.get(backend.api_key_env):
            raise ConfigException('Environment variable {} is not set ({} mode)'.format(
                backend.api_key_env, backend.mode))
    if backend.mode in ('record', 'replay') and backend.replay_file is None:
        raise ConfigException('backend.replay_file is required in {} mode'.format(backend.mode))
    if backend.mode == 'script' and backend.script_file is None:
        raise ConfigException('backend.script_file is required in script mode')


def _path(base, value, key):
    if value is None:
        return None
    if not isinstance(value, str) or not value:
        raise ConfigException('{}: expected a path, got {!r}'.format(key, value))
    path = Path(value)
    return path if path.is_absolute() else base / path


def _parse_backend(section, base):
    if not isinstance(section, dict):
        raise ConfigException('backend: expected a mapping')
    _unknown(section, _BACKEND_KEYS, 'backend')
    defaults = BackendSettings()
    backoff = section.get('retry_backoff', list(defaults.retry_backoff))
    if not isinstance(backoff, list) or not backoff:
        raise ConfigException('backend.retry_backoff: expected a non-empty list of seconds')
    model = section.get('model', defaults.model)
    if not isinstance(model, str) or not model:
        raise ConfigException('backend.model: expected a model name')
    return BackendSettings(
        mode=section.get('mode', defaults.mode),
        base_url=section.get('base_url', defaults.base_url),
        model=model,
        api_key_env=section.get('api_key_env', defaults.api_key_env),
        timeout=_number(section.get('timeout', defaults.timeout), 'backend.timeout'),
        max_retries=_count(section.get('max_retries', defaults.max_retries), 'backend.max_retries'),
        retry_backoff=tuple(_number(value, 'backend.retry_backoff') for value in backoff),
        max_in_flight=_count(section.get('max_in_flight', defaults.max_in_flight), 'backend.max_in_flight', 1),
        cache_dir=_path(base, section.get('cache_dir'), 'backend.cache_dir'),
        replay_file=_path(base, section.get('replay_file'), 'backend.replay_file'),
        script_file=_path(base, section.get('script_file'), 'backend.script_file'),
    )


def _parse_decoding(section):
    if not isinstance(section, dict):
        raise ConfigException('decoding: expected a mapping')
    _unknown(section, _DECODING_KEYS, 'decoding')
    defaults = DecodingParams()
    try:
        return DecodingParams(
            temperature=_number(section.get('temperature', defaults.temperature), 'decoding.temperature'),
            max_tokens=_count(section.get('max_tokens', defaults.max_tokens), 'decoding.max_tokens', 1),
        )
    except ValueError as exc:
        raise ConfigException('decoding: {}'.format(exc)) from exc


def parse_run_settings(document, base=Path('.'), check_env=True) -> RunSettings:
    if not isinstance(document, dict):
        raise ConfigException('Run configuration must be a mapping')
    _unknown(document, _TOP_KEYS, 'config')
    missing = [key for key in _REQUIRED_KEYS if key not in document]
    if missing:
        raise ConfigException('config: missing key(s) {}'.format(', '.join(missing)))

    try:
        task = TaskKind(document['task'])
    except ValueError:
        raise ConfigException('task: {!r} is not one of {}'.format(
            document['task'], ', '.join(kind.value for kind in TaskKind))) from None
    dialect = document['dialect']
    if not isinstance(dialect, str) or not dialect:
        raise ConfigException('dialect: expected a dialect id')
    run_id = document.get('run_id')
    if run_id is not None and (not isinstance(run_id, str) or '/' in run_id or not run_id):
        raise ConfigException('run_id: expected a plain name, got {!r}'.format(run_id))

    settings = RunSettings(
        task=task,
        dataset=_path(base, document['dataset'], 'dataset'),
        dialect=dialect,
        profiles=_path(base, document['profiles'], 'profiles'),
        backend=_parse_backend(document['backend'], base),
        variants=_path(base, document.get('variants'), 'variants'),
        profile_mode=_choice(document.get('profile_mode', 'full'), PROFILE_MODES, 'profile_mode'),
        pipeline=_choice(document.get('pipeline', 'multi_agent'), PIPELINES, 'pipeline'),
        mode=_choice(document.get('mode', 'zero_shot'), MODES, 'mode'),
        shot_count=_count(document.get('shot_count', DEFAULT_SHOT_COUNT), 'shot_count'),
        few_shots=_path(base, document.get('few_shots'), 'few_shots'),
        max_refinements=_count(document.get('max_refinements', 2), 'max_refinements'),
        workers=_count(document.get('workers', 4), 'workers', 1),
        output_dir=_path(base, document.get('output_dir', 'runs'), 'output_dir'),
        run_id=run_id,
        decoding=_parse_decoding(document.get('decoding', {})),
    )
    if settings.mode == 'few_shot' and settings.few_shots is None:
        raise ConfigException('few_shots: a few-shot file is required in few_shot mode')
    if check_env:
        _check_backend(settings.backend, 'config')
    return settings


def load_run_settings(path, check_env=True) -> RunSettings:
    """Read and validate a run configuration file"""
    path = Path(path)
    try:
        with path.open(encoding='utf-8') as source:
            document = yaml.safe_load(source)
    except OSError as exc:
        raise ConfigException('Cannot read config {}: {}'.format(path, exc)) from exc
    except yaml.YAMLError as exc:
        raise ConfigException('Config {} is not valid YAML: {}'.format(path, exc)) from exc
    settings = replace(parse_run_settings(document, path.resolve().parent, check_env), source=path)
    logger.debug('Loaded run settings from {}'.format(path))
    return settings
