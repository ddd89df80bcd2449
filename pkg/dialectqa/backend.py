"""Chat-completion backends: live HTTP client, scripted mock, record/replay and response cache"""
import contextlib
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple

import requests

from .prompts import ChatPrompt, render_transcript

# Implementation notes:
#
# - Every backend has the same surface: `complete(CompletionRequest) -> Completion`.
# - ChatBackend POSTs {base_url}/chat/completions and reads
#   choices[0].message.content / choices[0].finish_reason.
#   - 429, 5xx, timeouts and connection errors are transient and retried with the
#     configured backoff schedule (last value repeats). Other non-2xx answers are
#     raised immediately as ProtocolException.
#   - max_in_flight is a hard cap per backend instance (semaphore).
# - CachingBackend stores responses on disk keyed by `cache_key`, one JSON file per
#   key, written through a temp file + os.replace so concurrent writers of the same
#   key end with one complete file (last writer wins, values are identical at
#   temperature 0). Concurrent misses of one key are collapsed into one transport call,
#   the per-key lock is dropped once no request holds or waits for it.
#   An unreadable cache file is logged and treated as a miss.
# - RecordingBackend appends (key, summary, content) lines to a replay file,
#   ReplayBackend serves them back without any transport.
# - The api key only lives in the session headers, it is never logged or stored.

logger = logging.getLogger('dialectqa.backend')

TRANSIENT_STATUSES = frozenset([429, 500, 502, 503, 504])
FINISH_REASONS = ('stop', 'length')
PROVENANCES = ('live', 'cache', 'replay', 'script')


class BackendException(Exception):
    pass


class TransportException(BackendException):
    def __init__(self, message, request_tag=''):
        super().__init__('{} [{}]'.format(message, request_tag) if request_tag else message)
        self.request_tag = request_tag


class ProtocolException(BackendException):
    def __init__(self, status, body, request_tag=''):
        excerpt = (body or '')[:200]
        super().__init__('HTTP {} from backend [{}]: {}'.format(status, request_tag, excerpt))
        self.status = status
        self.body = excerpt
        self.request_tag = request_tag


class MalformedResponseException(BackendException):
    pass


class ScriptException(BackendException):
    pass


class ReplayMissException(BackendException):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    prompt: ChatPrompt
    request_tag: str = ''

    def __post_init__(self):
        if not self.model:
            raise BackendException('CompletionRequest needs a model')


@dataclass(frozen=True)
class Completion:
    content: str
    finish_reason: str = 'stop'
    usage: Optional[Mapping[str, int]] = None
    provenance: str = 'live'

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            object.__setattr__(self, 'finish_reason', 'other')
        if self.provenance not in PROVENANCES:
            raise BackendException('Unknown provenance {!r}'.format(self.provenance))
        if self.finish_reason == 'stop' and self.content is None:
            raise MalformedResponseException('Completion finished with stop but has no content')

    def with_provenance(self, provenance):
        return Completion(self.content, self.finish_reason, self.usage, provenance)


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = 'https://api.openai.com/v1'
    api_key: str = field(default='', repr=False)
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: Tuple[float, ...] = (1.0, 2.0, 4.0)
    max_in_flight: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'retry_backoff', tuple(float(x) for x in self.retry_backoff) or (0.0,))
        if self.max_in_flight < 1:
            raise BackendException('max_in_flight must be >= 1')
        if self.max_retries < 0:
            raise BackendException('max_retries must be >= 0')

    def backoff(self, attempt):
        return self.retry_backoff[min(attempt, len(self.retry_backoff) - 1)]


def cache_key(request: CompletionRequest) -> str:
    """sha256 over model, ordered messages and decoding params, the request tag is excluded"""
    prompt = request.prompt
    material = {
        'model': request.model,
        'messages': [[message.role, message.content] for message in prompt.messages],
        'temperature': float(prompt.decoding.temperature),
        'max_tokens': int(prompt.decoding.max_tokens),
    }
    encoded = json.dumps(material, sort_keys=True, ensure_ascii=False, separators=(',', ':'))
    return hashlib.sha256(encoded.encode('utf-8')).hexdigest()


# Live chat-completion client
class ChatBackend:
    def __init__(self, config: BackendConfig, session=None, sleep=time.sleep):
        self.config = config
        self.url = config.base_url.rstrip('/') + '/chat/completions'
        self.calls = 0
        self._sleep = sleep
        self._calls_lock = threading.Lock()
        self._in_flight = threading.BoundedSemaphore(config.max_in_flight)
        self._setup_connection(session)

    def _setup_connection(self, session):
        self.session = session if session is not None else requests.Session()
        self.session.headers['Content-Type'] = 'application/json'
        if self.config.api_key:
            self.session.headers['Authorization'] = 'Bearer ' + self.config.api_key

    def complete(self, request: CompletionRequest) -> Completion:
        """Send one request, retrying transient failures. May raise BackendException subclasses."""
        payload = json.dumps({
            'model': request.model,
            'messages': request.prompt.to_wire(),
            'temperature': request.prompt.decoding.temperature,
            'max_tokens': request.prompt.decoding.max_tokens,
        })
        attempts = self.config.max_retries + 1
        last_problem = None
        for attempt in range(attempts):
            if attempt:
                delay = self.config.backoff(attempt - 1)
                logger.info('Retrying {} in {:.1f}s after {}'.format(request.request_tag, delay, last_problem))
                self._sleep(delay)
            try:
                with self._in_flight:
                    with self._calls_lock:
                        self.calls += 1
                    response = self.session.post(self.url, data=payload, timeout=self.config.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_problem = repr(exc)
                continue
            except requests.RequestException as exc:
                raise TransportException('Request failed ({})'.format(exc), request.request_tag) from exc

            if response.status_code in TRANSIENT_STATUSES:
                last_problem = 'HTTP {}'.format(response.status_code)
                continue
            if not 200 <= response.status_code < 300:
                raise ProtocolException(response.status_code, response.text, request.request_tag)
            return self._parse(response, request)

        raise TransportException('Gave up after {} attempts, last problem: {}'.format(attempts, last_problem),
                                 request.request_tag)

    @staticmethod
    def _parse(response, request):
        try:
            data = json.loads(response.text)
            choice = data['choices'][0]
            content = choice['message']['content']
            finish_reason = choice.get('finish_reason') or 'other'
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseException('Unexpected response shape for {}: {}'.format(
                request.request_tag, response.text[:200])) from exc
        if content is None and finish_reason == 'stop':
            raise MalformedResponseException('Missing content for {}'.format(request.request_tag))
        logger.debug('{} -> {} chars ({})'.format(request.request_tag, len(content or ''), finish_reason))
        return Completion(content or '', finish_reason, data.get('usage'), 'live')


# Mock implementation, keyed on prompt hash
class ScriptedBackend:
    """Serves scripted responses: by cache key from `script`, else from `responder(request)`"""

    def __init__(self, script: Optional[Mapping[str, str]] = None,
                 responder: Optional[Callable[[CompletionRequest], str]] = None):
        self.script = dict(script or {})
        self.responder = responder
        self.requests = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path):
        """Load a script file of JSON lines {"key": ..., "content": ...}"""
        script = {}
        with open(path, encoding='utf-8') as source:
            for line in source:
                if line.strip():
                    record = json.loads(line)
                    script[record['key']] = record['content']
        return cls(script)

    @property
    def calls(self):
        return len(self.requests)

    def complete(self, request: CompletionRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
        key = cache_key(request)
        if key in self.script:
            return Completion(self.script[key], provenance='script')
        if self.responder is not None:
            return Completion(self.responder(request), provenance='script')
        raise ScriptException('No scripted response for {} ({})'.format(key, request.request_tag))


class ResponseCache:
    """Digest -> completion store, on disk when `directory` is given, else in memory"""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._memory: Dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        return self.directory / key[:2] / '{}.json'.format(key)

    def get(self, key) -> Optional[Completion]:
        if self.directory is None:
            with self._lock:
                entry = self._memory.get(key)
        else:
            path = self._path(key)
            if not path.is_file():
                return None
            try:
                with path.open(encoding='utf-8') as source:
                    entry = json.load(source)
                return Completion(entry['content'], entry['finish_reason'], entry.get('usage'), 'cache')
            except (OSError, ValueError, KeyError, TypeError, MalformedResponseException) as exc:
                logger.warning('Unreadable cache entry {}, treated as a miss ({!r})'.format(path, exc))
                return None
        if entry is None:
            return None
        return Completion(entry['content'], entry['finish_reason'], entry.get('usage'), 'cache')

    def put(self, key, completion: Completion):
        entry = {
            'content': completion.content,
            'finish_reason': completion.finish_reason,
            'usage': completion.usage,
            'provenance': completion.provenance,
            'timestamp': time.time(),
        }
        if self.directory is None:
            with self._lock:
                self._memory[key] = entry
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        handle, tmp_name = tempfile.mkstemp(dir=str(path.parent), suffix='.tmp')
        with os.fdopen(handle, 'w', encoding='utf-8') as target:
            json.dump(entry, target, ensure_ascii=False)
        os.replace(tmp_name, str(path))


class CachingBackend:
    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        # key -> (lock, number of requests holding or waiting for it)
        self._locks: Dict[str, Tuple[threading.Lock, int]] = {}
        self._locks_lock = threading.Lock()

    @contextlib.contextmanager
    def _key_lock(self, key):
        with self._locks_lock:
            lock, users = self._locks.get(key, (None, 0))
            lock = lock or threading.Lock()
            self._locks[key] = (lock, users + 1)
        try:
            with lock:
                yield
        finally:
            with self._locks_lock:
                remaining = self._locks[key][1] - 1
                if remaining:
                    self._locks[key] = (lock, remaining)
                else:
                    del self._locks[key]

    def complete(self, request: CompletionRequest) -> Completion:
        key = cache_key(request)
        with self._key_lock(key):
            cached = self.cache.get(key)
            if cached is not None:
                logger.debug('Cache hit for {}'.format(request.request_tag))
                return cached
            completion = self.inner.complete(request)
            self.cache.put(key, completion)
            return completion


class RecordingBackend:
    """Pass-through that appends every exchange to a replay file"""

    def __init__(self, inner, replay_path):
        self.inner = inner
        self.replay_path = Path(replay_path)
        self.replay_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> Completion:
        completion = self.inner.complete(request)
        record = {
            'key': cache_key(request),
            'model': request.model,
            'request_tag': request.request_tag,
            'messages': len(request.prompt.messages),
            'content': completion.content,
            'finish_reason': completion.finish_reason,
        }
        with self._lock:
            with self.replay_path.open('a', encoding='utf-8') as target:
                target.write(json.dumps(record, ensure_ascii=False) + '\n')
        return completion


class ReplayBackend:
    """Serves a recorded session, never opens a connection"""

    def __init__(self, replay_path):
        self.replay_path = Path(replay_path)
        self.records: Dict[str, dict] = {}
        with self.replay_path.open(encoding='utf-8') as source:
            for line in source:
                if line.strip():
                    record = json.loads(line)
                    self.records[record['key']] = record
        logger.info('Loaded {} replay records from {}'.format(len(self.records), self.replay_path))

    def complete(self, request: CompletionRequest) -> Completion:
        key = cache_key(request)
        record = self.records.get(key)
        if record is None:
            raise ReplayMissException('No recorded response for {} ({})'.format(key, request.request_tag))
        return Completion(record['content'], record.get('finish_reason', 'stop'), provenance='replay')


class TranscriptBackend:
    """Pass-through that writes each prompt and its reply as text, one file per request tag"""

    def __init__(self, inner, directory):
        self.inner = inner
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def complete(self, request: CompletionRequest) -> Completion:
        completion = self.inner.complete(request)
        name = (request.request_tag or cache_key(request)).replace(':', '_').replace('/', '_')
        text = render_transcript(request.prompt) + '=== reply ({})\n{}\n'.format(
            completion.provenance, completion.content)
        (self.directory / '{}.txt'.format(name)).write_text(text, encoding='utf-8')
        return completion


def make_backend(settings, session=None):
    """Build the backend stack described by config.BackendSettings"""
    mode = settings.mode
    if mode == 'replay':
        return ReplayBackend(settings.replay_file)
    if mode == 'script':
        backend = ScriptedBackend.from_file(settings.script_file)
    else:
        api_key = os.environ.get(settings.api_key_env, '') if settings.api_key_env else ''
        backend = ChatBackend(BackendConfig(
            base_url=settings.base_url,
            api_key=api_key,
            timeout=settings.timeout,
            max_retries=settings.max_retries,
            retry_backoff=settings.retry_backoff,
            max_in_flight=settings.max_in_flight,
        ), session=session)
    if settings.cache_dir:
        backend = CachingBackend(backend, ResponseCache(settings.cache_dir))
    if mode == 'record':
        backend = RecordingBackend(backend, settings.replay_file)
    return backend
