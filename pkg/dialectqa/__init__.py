"""Dialect-aware multi-agent question answering over privacy policies"""
from .backend import ChatBackend, ScriptedBackend, make_backend
from .datasets import GoldAnswer, Label, QAExample, attach_dialect_variants, load_policyqa, load_privacyqa
from .orchestrator import RefinementTrace, RunConfig, Verdict, run_example, translate_example
from .profiles import DialectProfile, ProfileRegistry, load_profiles, render_profile
from .prompts import TaskKind

__version__ = '0.1.0'
