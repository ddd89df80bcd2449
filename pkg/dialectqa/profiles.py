"""Dialect background blocks for the Dialect Agent prompts"""
import io
import logging
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Tuple

import yaml

# Implementation notes:
#
# - The profile file is a YAML document stream, one document per profile:
#
#     id: indian
#     display_name: Indian English
#     phonetics: [...]
#     grammar: [...]
#     vocabulary: [...]
#     cultural_notes: [...]
#
# - `generic` is reserved and synthetic, it is always in a registry and can't be
#   defined in a file. It renders to the bare "linguistics expert" sentence used
#   for the no-dialect-information ablation.
# - Section order is fixed, rendered prompts must be byte-stable for the cache.

GENERIC_ID = 'generic'
GENERIC_TEXT = 'You are a linguistics expert in English dialects'

SECTIONS = (
    ('phonetics', 'Phonetics and Pronunciation'),
    ('grammar', 'Grammar'),
    ('vocabulary', 'Vocabulary'),
    ('cultural_notes', 'Cultural Notes'),
)
_KEYS = {'id', 'display_name'} | {key for key, _ in SECTIONS}

logger = logging.getLogger('dialectqa.profiles')


class ProfileException(Exception):
    pass


class ProfileParseException(ProfileException):
    def __init__(self, message, line=None, field_name=None):
        location = []
        if line is not None:
            location.append('line {}'.format(line))
        if field_name is not None:
            location.append('field {!r}'.format(field_name))
        if location:
            message = '{} ({})'.format(message, ', '.join(location))
        super().__init__(message)
        self.line = line
        self.field = field_name


class DuplicateProfileException(ProfileException):
    pass


class UnknownDialectException(ProfileException):
    pass


@dataclass(frozen=True)
class DialectProfile:
    """Linguistic summary of one dialect"""
    id: str
    display_name: str
    phonetics: Tuple[str, ...] = ()
    grammar: Tuple[str, ...] = ()
    vocabulary: Tuple[str, ...] = ()
    cultural_notes: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        for key, _ in SECTIONS:
            object.__setattr__(self, key, tuple(getattr(self, key)))
        if not self.id or any(ch.isspace() for ch in self.id):
            raise ProfileException('Invalid profile id {!r}'.format(self.id))
        if not self.is_generic and not any(getattr(self, key) for key, _ in SECTIONS):
            raise ProfileException('Profile {} has no bullets'.format(self.id))

    @property
    def is_generic(self):
        return self.id == GENERIC_ID

    def to_dict(self):
        data = {'id': self.id, 'display_name': self.display_name}
        for key, _ in SECTIONS:
            data[key] = list(getattr(self, key))
        return data


GENERIC_PROFILE = DialectProfile(id=GENERIC_ID, display_name='English dialects')


class ProfileRegistry:
    """Immutable id -> DialectProfile mapping, always containing `generic`"""

    def __init__(self, profiles: Iterable[DialectProfile] = ()):
        found = {}
        for profile in profiles:
            if profile.id in found or profile.id == GENERIC_ID:
                raise DuplicateProfileException('Duplicate profile id {!r}'.format(profile.id))
            found[profile.id] = profile
        found[GENERIC_ID] = GENERIC_PROFILE
        self._profiles = types.MappingProxyType(found)

    def get(self, dialect_id):
        """Look up a profile, unknown ids raise UnknownDialectException"""
        try:
            return self._profiles[dialect_id]
        except KeyError:
            raise UnknownDialectException('Unknown dialect {!r}, known: {}'.format(
                dialect_id, ', '.join(sorted(self._profiles)))) from None

    def ids(self):
        return tuple(self._profiles)

    def __contains__(self, dialect_id):
        return dialect_id in self._profiles

    def __iter__(self):
        return iter(self._profiles.values())

    def __len__(self):
        return len(self._profiles)

    def __eq__(self, other):
        if not isinstance(other, ProfileRegistry):
            return NotImplemented
        return dict(self._profiles) == dict(other._profiles)  # pylint: disable=W0212

    def __repr__(self):
        return 'ProfileRegistry({})'.format(', '.join(self._profiles))


def _read_text(source):
    if hasattr(source, 'read'):
        return source.read()
    return Path(source).read_text(encoding='utf-8')


def _field_line(node, name):
    for key_node, value_node in node.value:
        if key_node.value == name:
            return value_node.start_mark.line + 1
    return node.start_mark.line + 1


def _bullets(document, node, name):
    value = document.get(name) or []
    if not isinstance(value, list) or not all(isinstance(item, str) and item.strip() for item in value):
        raise ProfileParseException('Expected a list of non-empty strings', _field_line(node, name), name)
    return tuple(value)


def _parse_profile(document, node):
    if not isinstance(document, dict):
        raise ProfileParseException('Profile document must be a mapping', node.start_mark.line + 1)
    unknown = sorted(set(document) - _KEYS)
    if unknown:
        raise ProfileParseException('Unknown key', _field_line(node, unknown[0]), unknown[0])
    for name in ('id', 'display_name'):
        value = document.get(name)
        if not isinstance(value, str) or not value.strip():
            raise ProfileParseException('Missing or empty value', _field_line(node, name), name)
    if document['id'] == GENERIC_ID:
        raise DuplicateProfileException('Profile id {!r} is reserved'.format(GENERIC_ID))
    bullets = {key: _bullets(document, node, key) for key, _ in SECTIONS}
    try:
        return DialectProfile(id=document['id'], display_name=document['display_name'], **bullets)
    except ProfileException as exc:
        raise ProfileParseException(str(exc), node.start_mark.line + 1, 'id') from exc


def load_profiles(source) -> ProfileRegistry:
    """Load a profile file (path or readable stream) into a registry"""
    text = _read_text(source)
    try:
        nodes = list(yaml.compose_all(text, Loader=yaml.SafeLoader))
        documents = list(yaml.safe_load_all(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        raise ProfileParseException('Malformed profile file: {}'.format(
            getattr(exc, 'problem', exc)), mark.line + 1 if mark else None) from exc

    profiles = []
    for document, node in zip(documents, nodes):
        if document is None:
            continue
        profiles.append(_parse_profile(document, node))
    registry = ProfileRegistry(profiles)
    logger.debug('Loaded {} dialect profiles'.format(len(profiles)))
    return registry


def write_profiles(registry, stream=None):
    """Write every non-generic profile as a YAML document stream, returns the text if no stream given"""
    documents = [profile.to_dict() for profile in registry if not profile.is_generic]
    text = yaml.safe_dump_all(documents, sort_keys=False, allow_unicode=True, explicit_start=True) \
        if documents else ''
    if stream is None:
        return text
    if isinstance(stream, (str, Path)):
        Path(stream).write_text(text, encoding='utf-8')
    else:
        stream.write(text)
    return text


def render_profile(profile: DialectProfile) -> str:
    """Render the block injected at the {dialect_info} slot"""
    if profile.is_generic:
        return GENERIC_TEXT
    out = io.StringIO()
    out.write('Key Features of {}\n'.format(profile.display_name))
    for key, heading in SECTIONS:
        bullets = getattr(profile, key)
        if not bullets:
            continue
        out.write('\n{}:\n'.format(heading))
        for bullet in bullets:
            out.write('- {}\n'.format(bullet))
    return out.getvalue().rstrip('\n')
