"""Batch runs, trace persistence, scoring and report rendering"""
import collections
import csv
import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from .backend import TranscriptBackend, make_backend
from .config import RunSettings, load_run_settings
from .datasets import SAE_ID, attach_dialect_variants, load_examples
from .log import log_exceptions
from .metrics import (DialectScore, OverrideStats, classification_f1, corpus_bleu, disparity, display,
                      format_score, override_stats, override_stats_by_dialect, rouge_l, token_f1)
from .orchestrator import ExampleException, RefinementTrace, RunConfig, fallback_verdict, run_example
from .profiles import load_profiles
from .prompts import ShotKind, TaskKind, load_few_shots, select_shots

# Implementation notes:
#
# - One run = one (config, dialect). Its directory output_dir/run_id holds
#   manifest.json and traces.jsonl.
# - traces.jsonl is append-only. Readers keep the latest record per
#   (example_id, dialect_id), so a failed example re-run on resume simply
#   shadows its old record. A torn last line (killed mid-write) is skipped.
# - Workers run examples concurrently, every write goes through TraceWriter.
# - Scoring is single threaded and sorted, reports are byte-stable.

logger = logging.getLogger('dialectqa.runner')

MANIFEST_NAME = 'manifest.json'
TRACES_NAME = 'traces.jsonl'
METRIC_NAMES = {
    TaskKind.privacy_classification: 'f1',
    TaskKind.policy_extraction: 'token_f1',
}
DISPARITY_COLUMNS = ('AVG', 'AVG Diff', 'Max Diff')
OVERRIDE_COLUMNS = ('n_traces', 'n_overrides', 'override_rate', 'beneficial_rate', 'detrimental_rate',
                    'neutral_rate')


class RunException(Exception):
    pass


class ScoringException(Exception):
    def __init__(self, message, unmatched_ids=()):
        super().__init__(message)
        self.unmatched_ids = list(unmatched_ids)


class ReportException(Exception):
    pass


def dialect_order(dialect_ids):
    """SAE first, the rest alphabetically"""
    return tuple(sorted(set(dialect_ids), key=lambda dialect_id: (dialect_id != SAE_ID, dialect_id)))


def file_digest(path):
    if path is None:
        return None
    digest = hashlib.sha256()
    with open(path, 'rb') as source:
        for chunk in iter(lambda: source.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def input_files(settings: RunSettings):
    """Path and content digest of every input file a run reads, None for unused ones"""
    paths = {
        'dataset': settings.dataset,
        'variants': settings.variants,
        'few_shots': settings.few_shots if settings.mode == 'few_shot' else None,
        'profiles': settings.profiles,
    }
    return {name: None if path is None else {'path': str(path), 'digest': file_digest(path)}
            for name, path in paths.items()}


def changed_inputs(recorded, current):
    return sorted(name for name in set(recorded) | set(current)
                  if (recorded.get(name) or {}).get('digest') != (current.get(name) or {}).get('digest'))


@dataclass
class RunManifest:
    run_id: str
    created_at: float
    config: dict
    datasets: Dict[str, Optional[Dict[str, str]]]
    model: str
    counts: Dict[str, int] = field(default_factory=lambda: {
        'total': 0, 'completed': 0, 'failed': 0, 'parse_failures': 0})

    def to_dict(self):
        return {
            'run_id': self.run_id,
            'created_at': self.created_at,
            'config': dict(self.config),
            'datasets': dict(self.datasets),
            'model': self.model,
            'counts': dict(self.counts),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')

    @classmethod
    def read(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


class TraceWriter:
    """Single appender for traces.jsonl, safe to share between workers"""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if self.path.is_file() and self.path.stat().st_size:
            with self.path.open('rb') as source:
                source.seek(-1, 2)
                torn = source.read(1) != b'\n'
            if torn:
                with self.path.open('a', encoding='utf-8') as target:
                    target.write('\n')

    def append(self, trace: RefinementTrace):
        line = json.dumps(trace.to_record(), ensure_ascii=False, sort_keys=True)
        with self._lock:
            with self.path.open('a', encoding='utf-8') as target:
                target.write(line + '\n')
                target.flush()


def read_traces(path) -> List[RefinementTrace]:
    """Latest record per (example_id, dialect_id), sorted"""
    latest: Dict[Tuple[str, str], RefinementTrace] = {}
    with open(path, encoding='utf-8') as source:
        for line_no, line in enumerate(source, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError:
                logger.warning('{}: line {}: skipping torn record'.format(path, line_no))
                continue
            try:
                trace = RefinementTrace.from_record(record)
            except (ValueError, KeyError, TypeError) as exc:
                raise ScoringException('{}: line {}: bad trace record ({!r})'.format(path, line_no, exc)) from exc
            latest[(trace.example_id, trace.dialect_id)] = trace
    return [latest[key] for key in sorted(latest, key=lambda key: (key[1], key[0]))]


def _run_config(settings: RunSettings, few_shots=()):
    return RunConfig(
        task=settings.task,
        dialect_id=settings.dialect,
        model=settings.backend.model,
        profile_mode=settings.profile_mode,
        pipeline=settings.pipeline,
        mode=settings.mode,
        shot_count=settings.shot_count,
        max_refinements=settings.max_refinements,
        decoding=settings.decoding,
        few_shots=few_shots,
    )


def _shot_kinds(settings: RunSettings):
    answer = ShotKind(settings.task.value)
    if settings.pipeline == 'translate_only':
        return (ShotKind.translation,)
    if settings.pipeline == 'single_agent':
        return (answer,)
    return (ShotKind.translation, answer, ShotKind.evaluation)


def prepare_run(settings: RunSettings):
    """Load and check everything a run needs, nothing here talks to a backend"""
    registry = load_profiles(settings.profiles)
    registry.get(settings.dialect)
    examples = load_examples(settings.task, settings.dataset)
    if settings.variants is None and settings.dialect != SAE_ID:
        logger.warning('No variant file for dialect {}, using the SAE questions'.format(settings.dialect))
    examples = attach_dialect_variants(examples, settings.variants, settings.dialect)
    few_shots = ()
    if settings.mode == 'few_shot':
        few_shots = load_few_shots(settings.few_shots)
        for kind in _shot_kinds(settings):
            select_shots(few_shots, kind, settings.shot_count)
    return registry, examples, _run_config(settings, few_shots)


def _failed_trace(example, cfg, exc):
    return RefinementTrace(
        example_id=example.example_id,
        dialect_id=example.dialect_id,
        task=cfg.task,
        mode=cfg.mode,
        pipeline=cfg.pipeline,
        profile_mode=cfg.profile_mode,
        model=cfg.model,
        max_refinements=cfg.max_refinements,
        error=str(exc),
        created_at=time.time(),
    )


def _count(traces, total):
    return {
        'total': total,
        'completed': sum(1 for trace in traces if not trace.failed),
        'failed': sum(1 for trace in traces if trace.failed),
        'parse_failures': sum(len(trace.parse_failures) for trace in traces),
    }


def run_eval(config, resume=None, backend=None, progress=True, overrides=None,
             dump_prompts=False) -> Tuple[RunManifest, Path]:
    """Run every example of a configuration, persisting one trace per example.

    `config` is a config path or a RunSettings. `resume` names an existing run
    whose successful examples are skipped. Returns the manifest and trace path.
    """
    settings = config if isinstance(config, RunSettings) else load_run_settings(config, check_env=backend is None)
    if overrides:
        settings = settings.with_overrides(check_env=backend is None, **overrides)
    registry, examples, cfg = prepare_run(settings)

    run_id = resume or settings.run_id or '{}-{}-{}'.format(
        time.strftime('%Y%m%d-%H%M%S'), settings.dialect, settings.pipeline)
    run_dir = Path(settings.output_dir) / run_id
    if resume and not (run_dir / TRACES_NAME).is_file():
        raise RunException('Nothing to resume in {}'.format(run_dir))
    run_dir.mkdir(parents=True, exist_ok=True)
    trace_path = run_dir / TRACES_NAME
    manifest_path = run_dir / MANIFEST_NAME

    inputs = input_files(settings)
    if manifest_path.is_file():
        manifest = RunManifest.read(manifest_path)
        if manifest.config != cfg.snapshot():
            raise RunException('Run {} was started with a different configuration'.format(run_id))
        changed = changed_inputs(manifest.datasets, inputs)
        if changed:
            raise RunException('Run {}: input file(s) changed since it started: {}'.format(
                run_id, ', '.join(changed)))
    else:
        manifest = RunManifest(
            run_id=run_id,
            created_at=time.time(),
            config=cfg.snapshot(),
            datasets=inputs,
            model=settings.backend.model,
        )
    manifest.counts['total'] = len(examples)
    manifest.write(manifest_path)

    done = set()
    if trace_path.is_file():
        done = {trace.example_id for trace in read_traces(trace_path) if not trace.failed}
    pending = [example for example in examples if example.example_id not in done]
    logger.info('Run {}: {} examples, {} already done'.format(run_id, len(examples), len(examples) - len(pending)))

    if pending:
        backend = backend if backend is not None else make_backend(settings.backend)
        if dump_prompts:
            backend = TranscriptBackend(backend, run_dir / 'prompts')
        writer = TraceWriter(trace_path)

        @log_exceptions
        def work(example):
            try:
                trace = run_example(example, cfg, registry, backend)
            except ExampleException as exc:
                logger.error('{}'.format(exc))
                trace = _failed_trace(example, cfg, exc)
            writer.append(trace)
            return trace

        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            futures = [pool.submit(work, example) for example in pending]
            with tqdm(total=len(futures), unit='example', disable=None if progress else True) as bar:
                for future in as_completed(futures):
                    future.result()
                    bar.update(1)

    traces = read_traces(trace_path) if trace_path.is_file() else []
    manifest.counts = _count(traces, len(examples))
    manifest.write(manifest_path)
    logger.info('Run {} finished: {}'.format(run_id, manifest.counts))
    return manifest, trace_path


@dataclass(frozen=True)
class ReportRow:
    label: str
    scores: Tuple[Tuple[str, float], ...]
    avg: float
    avg_diff: Optional[float]
    max_diff: Optional[float]

    @classmethod
    def from_scores(cls, label, scores, counts=None):
        """Row with disparity fields derived from (dialect_id, score) pairs.

        Disparity needs two dialects, a single-dialect row leaves both diffs None.
        """
        scores = tuple((dialect_id, float(score)) for dialect_id, score in scores)
        if len(scores) < 2:
            avg = scores[0][1] if scores else 0.0
            return cls(label, scores, avg, None, None)
        counts = counts or {}
        report = disparity(DialectScore(dialect_id, score, counts.get(dialect_id, 1))
                           for dialect_id, score in scores)
        return cls(label, scores, report.avg, report.avg_diff, report.max_diff)

    def score(self, dialect_id):
        return dict(self.scores).get(dialect_id)

    def to_dict(self):
        return {'label': self.label, 'scores': dict(self.scores), 'avg': self.avg,
                'avg_diff': self.avg_diff, 'max_diff': self.max_diff}

    @classmethod
    def from_dict(cls, data):
        return cls(data['label'], tuple(data['scores'].items()), data['avg'], data['avg_diff'], data['max_diff'])

    def rounded(self):
        return ReportRow(self.label, tuple((dialect_id, display(score)) for dialect_id, score in self.scores),
                         display(self.avg), _display_optional(self.avg_diff), _display_optional(self.max_diff))


def _display_optional(value):
    return None if value is None else display(value)


def _round_stats(stats: OverrideStats):
    return OverrideStats(stats.n_traces, stats.n_overrides, display(stats.override_rate),
                         display(stats.beneficial_rate), display(stats.detrimental_rate),
                         display(stats.neutral_rate))


@dataclass(frozen=True)
class ReportTable:
    """Per-dialect scores per configuration, with their override blocks"""
    metric: str
    dialects: Tuple[str, ...] = ()
    rows: Tuple[ReportRow, ...] = ()
    overrides: Tuple[Tuple[str, OverrideStats], ...] = ()

    def row(self, label) -> Optional[ReportRow]:
        for row in self.rows:
            if row.label == label:
                return row
        return None

    def override(self, label) -> Optional[OverrideStats]:
        return dict(self.overrides).get(label)

    def rounded(self):
        return replace(self,
                       rows=tuple(row.rounded() for row in self.rows),
                       overrides=tuple((label, _round_stats(stats)) for label, stats in self.overrides))

    def to_dict(self):
        return {
            'metric': self.metric,
            'dialects': list(self.dialects),
            'rows': [row.to_dict() for row in self.rows],
            'overrides': [dict(label=label, **stats.to_dict()) for label, stats in self.overrides],
        }

    @classmethod
    def from_dict(cls, data):
        overrides = []
        for entry in data.get('overrides', []):
            entry = dict(entry)
            overrides.append((entry.pop('label'), OverrideStats(**entry)))
        return cls(data['metric'], tuple(data.get('dialects', ())),
                   tuple(ReportRow.from_dict(row) for row in data.get('rows', [])), tuple(overrides))


def write_report(table: ReportTable, path):
    Path(path).write_text(json.dumps(table.to_dict(), indent=2) + '\n', encoding='utf-8')


def read_report(path) -> ReportTable:
    try:
        return ReportTable.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))
    except (ValueError, KeyError, TypeError) as exc:
        raise ReportException('{} is not a report document: {}'.format(path, exc)) from exc


def _verdict(trace, which):
    verdict = getattr(trace, which)
    return verdict if verdict is not None else fallback_verdict(trace.task)


def _dialect_score(task, traces, golds, which):
    if TaskKind(task) == TaskKind.privacy_classification:
        return classification_f1([_verdict(trace, which).value for trace in traces],
                                 [golds[trace.example_id].gold.label for trace in traces])
    return sum(token_f1(_verdict(trace, which).value, golds[trace.example_id].gold.spans)
               for trace in traces) / len(traces)


def config_label(trace):
    """Row label, one per distinct configuration: pipeline/mode/profile_mode/r<cap>/model"""
    return '{}/{}/{}/r{}/{}'.format(trace.pipeline, trace.mode, trace.profile_mode, trace.max_refinements,
                                    trace.model)


def score_traces(traces: Sequence[RefinementTrace], examples) -> ReportTable:
    """Per-dialect final (and initial) scores with disparity and override blocks.

    Traces of several configurations give one row each, multi-agent rows get an
    `initial` twin and an override block.
    """
    golds = {example.example_id: example for example in examples}
    traces = [trace for trace in traces if trace.pipeline != 'translate_only']
    if not traces:
        raise ScoringException('No answer traces to score')
    tasks = {TaskKind(trace.task) for trace in traces}
    if len(tasks) != 1:
        raise ScoringException('Traces mix tasks: {}'.format(', '.join(sorted(task.value for task in tasks))))
    task = tasks.pop()

    unmatched = sorted({trace.example_id for trace in traces if trace.example_id not in golds})
    if unmatched:
        raise ScoringException('{} trace id(s) have no gold: {}'.format(
            len(unmatched), ', '.join(unmatched[:20])), unmatched)
    if any(golds[trace.example_id].task != task for trace in traces):
        raise ScoringException('Gold file does not match task {}'.format(task.value))

    groups: Dict[str, Dict[str, List[RefinementTrace]]] = {}
    for trace in traces:
        groups.setdefault(config_label(trace), {}).setdefault(trace.dialect_id, []).append(trace)

    dialects = dialect_order(trace.dialect_id for trace in traces)
    rows, overrides = [], []
    gold_answers = {example_id: example.gold for example_id, example in golds.items()}
    for label in sorted(groups):
        by_dialect = groups[label]
        missing = []
        for dialect_id, group in by_dialect.items():
            seen = collections.Counter(trace.example_id for trace in group)
            repeated = sorted(example_id for example_id, count in seen.items() if count > 1)
            if repeated:
                raise ScoringException('{}: {} example(s) traced more than once for {}: {}'.format(
                    label, len(repeated), dialect_id, ', '.join(repeated[:20])),
                    ['{}:{}'.format(dialect_id, example_id) for example_id in repeated])
            missing.extend('{}:{}'.format(dialect_id, example_id) for example_id in golds if example_id not in seen)
        if missing:
            raise ScoringException('{}: {} gold example(s) without a trace: {}'.format(
                label, len(missing), ', '.join(sorted(missing)[:20])), missing)

        order = [dialect_id for dialect_id in dialects if dialect_id in by_dialect]
        counts = {dialect_id: len(by_dialect[dialect_id]) for dialect_id in order}
        rows.append(ReportRow.from_scores(label, [
            (dialect_id, _dialect_score(task, by_dialect[dialect_id], golds, 'final_verdict'))
            for dialect_id in order], counts))
        if label.startswith('multi_agent/'):
            rows.append(ReportRow.from_scores(label + ' initial', [
                (dialect_id, _dialect_score(task, by_dialect[dialect_id], golds, 'initial_verdict'))
                for dialect_id in order], counts))
            scored = [trace for dialect_id in order for trace in by_dialect[dialect_id] if not trace.failed]
            overrides.append((label, override_stats(scored, gold_answers)))
            per_dialect = override_stats_by_dialect(scored, gold_answers)
            overrides.extend(('{}:{}'.format(label, dialect_id), per_dialect[dialect_id])
                             for dialect_id in order if dialect_id in per_dialect)

    return ReportTable(METRIC_NAMES[task], dialects, tuple(rows), tuple(overrides))


def score_run(trace_paths, gold_path) -> ReportTable:
    """Score one or more trace files against the SAE gold dataset"""
    if isinstance(trace_paths, (str, Path)):
        trace_paths = [trace_paths]
    traces = []
    for path in trace_paths:
        traces.extend(read_traces(path))
    if not traces:
        raise ScoringException('No traces in {}'.format(', '.join(str(path) for path in trace_paths)))
    task = TaskKind(traces[0].task)
    return score_traces(traces, load_examples(task, gold_path))


def score_translations(trace_path, examples) -> Dict[str, float]:
    """Corpus BLEU and mean ROUGE-L of the Step 1 translations against SAE references"""
    traces = read_traces(trace_path)
    if not traces:
        raise ScoringException('No translations in {}'.format(trace_path))
    references = {example.example_id: example.sae_reference_question or example.question
                  for example in examples}
    unmatched = sorted({trace.example_id for trace in traces if not references.get(trace.example_id)})
    if unmatched:
        raise ScoringException('{} translation(s) without an SAE reference: {}'.format(
            len(unmatched), ', '.join(unmatched[:20])), unmatched)
    candidates = [trace.translated_question for trace in traces]
    targets = [references[trace.example_id] for trace in traces]
    rouge = [rouge_l(candidate, target) if candidate.strip() else 0.0
             for candidate, target in zip(candidates, targets)]
    return {
        'bleu': corpus_bleu(candidates, [[target] for target in targets]),
        'rouge_l': sum(rouge) / len(rouge),
        'n': len(traces),
    }


def _format_stat(column, value):
    return str(value) if column.startswith('n_') else format_score(value)


def _format_optional(value, blank):
    return blank if value is None else format_score(value)


def render_csv(table: ReportTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow((table.metric,) + table.dialects + DISPARITY_COLUMNS)
    for row in table.rows:
        writer.writerow([row.label] + [
            format_score(row.score(dialect_id)) if row.score(dialect_id) is not None else ''
            for dialect_id in table.dialects
        ] + [_format_optional(value, '') for value in (row.avg, row.avg_diff, row.max_diff)])
    if table.overrides:
        writer.writerow(())
        writer.writerow(('overrides',) + OVERRIDE_COLUMNS)
        for label, stats in table.overrides:
            writer.writerow([label] + [_format_stat(column, getattr(stats, column)) for column in OVERRIDE_COLUMNS])
    return buffer.getvalue()


def render_plain(table: ReportTable) -> str:
    header = ['config'] + list(table.dialects) + list(DISPARITY_COLUMNS)
    body = [[row.label] + [format_score(row.score(dialect_id)) if row.score(dialect_id) is not None else '-'
                           for dialect_id in table.dialects]
            + [_format_optional(value, '-') for value in (row.avg, row.avg_diff, row.max_diff)]
            for row in table.rows]
    lines = ['{} by dialect'.format(table.metric)] + _columns([header] + body)
    if table.overrides:
        override_header = ['overrides'] + list(OVERRIDE_COLUMNS)
        override_body = [[label] + [_format_stat(column, getattr(stats, column)) for column in OVERRIDE_COLUMNS]
                         for label, stats in table.overrides]
        lines += [''] + _columns([override_header] + override_body)
    return '\n'.join(lines) + '\n'


def _columns(rows):
    widths = [max(len(row[idx]) for row in rows) for idx in range(len(rows[0]))]
    return ['  '.join([row[0].ljust(widths[0])] + [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])])
            .rstrip() for row in rows]


def render_report(table: ReportTable, format='plain') -> str:  # pylint: disable=W0622
    if format == 'csv':
        return render_csv(table)
    if format == 'plain':
        return render_plain(table)
    raise ReportException('Unknown report format {!r}'.format(format))


def _parse_number(text, where):
    try:
        return float(text)
    except ValueError:
        raise ReportException('{}: not a number {!r}'.format(where, text)) from None


def parse_report_csv(text) -> ReportTable:
    """Read a csv rendering back, values are the 3-decimal display values"""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0]:
        raise ReportException('Empty report')
    header = rows[0]
    if len(header) < 1 + len(DISPARITY_COLUMNS) or tuple(header[-3:]) != DISPARITY_COLUMNS:
        raise ReportException('Unexpected report header {!r}'.format(header))
    metric, dialects = header[0], tuple(header[1:-3])

    score_rows, idx = [], 1
    while idx < len(rows) and rows[idx]:
        cells = rows[idx]
        where = 'row {}'.format(idx + 1)
        if len(cells) != len(header):
            raise ReportException('{}: expected {} cells'.format(where, len(header)))
        scores = tuple((dialect_id, _parse_number(cell, where))
                       for dialect_id, cell in zip(dialects, cells[1:-3]) if cell != '')
        avg, avg_diff, max_diff = (_parse_number(cell, where) if cell != '' else None for cell in cells[-3:])
        score_rows.append(ReportRow(cells[0], scores, avg, avg_diff, max_diff))
        idx += 1

    overrides = []
    if idx + 1 < len(rows):
        if tuple(rows[idx + 1]) != ('overrides',) + OVERRIDE_COLUMNS:
            raise ReportException('Unexpected override header {!r}'.format(rows[idx + 1]))
        for cells in rows[idx + 2:]:
            if not cells:
                continue
            values = {}
            for column, cell in zip(OVERRIDE_COLUMNS, cells[1:]):
                values[column] = int(cell) if column.startswith('n_') else _parse_number(cell, cells[0])
            overrides.append((cells[0], OverrideStats(**values)))
    return ReportTable(metric, dialects, tuple(score_rows), tuple(overrides))
