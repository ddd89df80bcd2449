"""Command line: run, score, report and translate"""
import argparse
import logging
import sys
from pathlib import Path

from .backend import BackendException
from .config import BACKEND_MODES, ConfigException, load_run_settings
from .datasets import DatasetException
from .log import error, init_logging, install_excepthook
from .profiles import ProfileException
from .prompts import FewShotException
from .runner import (ReportException, RunException, ScoringException, parse_report_csv, prepare_run,
                     read_report, render_report, run_eval, score_run, score_translations, write_report)

logger = logging.getLogger('dialectqa.cli')

EXPECTED_ERRORS = (BackendException, ConfigException, DatasetException, FewShotException, ProfileException,
                   ReportException, RunException, ScoringException, OSError)


def _add_run_options(parser):
    parser.add_argument('--config', required=True, help='Run configuration (YAML)')
    parser.add_argument('--backend-mode', choices=BACKEND_MODES, help='Override backend.mode from the config')
    parser.add_argument('--workers', type=int, help='Override the number of concurrent examples')
    parser.add_argument('--quiet', action='store_true', help='No progress bar')
    parser.add_argument('--dump-prompts', action='store_true',
                        help='Write every prompt and reply as text under <run>/prompts')


def build_parser():
    parser = argparse.ArgumentParser(prog='dialectqa', description='Dialect-aware privacy policy QA runs')
    parser.add_argument('--verbose', action='store_true', help='Print verbose messages during operation')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    run = commands.add_parser('run', help='Run a configuration and persist traces')
    _add_run_options(run)
    run.add_argument('--resume', metavar='RUN_ID', help='Continue an interrupted run')

    score = commands.add_parser('score', help='Score trace files against the gold dataset')
    score.add_argument('--traces', nargs='+', required=True, help='One or more traces.jsonl files')
    score.add_argument('--gold', required=True, help='SAE dataset the traces were run on')
    score.add_argument('--out', help='Write the report document (JSON) here')
    score.add_argument('--format', choices=('plain', 'csv'), default='plain')

    report = commands.add_parser('report', help='Render a report document')
    report.add_argument('--in', dest='source', required=True, help='Report document (JSON, or csv rendering)')
    report.add_argument('--format', choices=('plain', 'csv'), default='plain')

    translate = commands.add_parser('translate', help='Translation step only, scored with BLEU and ROUGE-L')
    _add_run_options(translate)
    translate.add_argument('--resume', metavar='RUN_ID', help='Continue an interrupted run')
    return parser


def _overrides(args, **extra):
    overrides = {'backend_mode': args.backend_mode, 'workers': args.workers}
    overrides.update(extra)
    return overrides


def cmd_run(args):
    manifest, trace_path = run_eval(args.config, resume=args.resume, progress=not args.quiet,
                                    overrides=_overrides(args), dump_prompts=args.dump_prompts)
    print('run {} -> {}'.format(manifest.run_id, trace_path))
    print(' '.join('{}={}'.format(key, value) for key, value in sorted(manifest.counts.items())))
    return 0 if manifest.counts['failed'] == 0 else 2


def cmd_score(args):
    table = score_run(args.traces, args.gold)
    if args.out:
        write_report(table, args.out)
        logger.info('Report written to {}'.format(args.out))
    sys.stdout.write(render_report(table, args.format))
    return 0


def cmd_report(args):
    source = Path(args.source)
    if source.suffix == '.csv':
        table = parse_report_csv(source.read_text(encoding='utf-8'))
    else:
        table = read_report(source)
    sys.stdout.write(render_report(table, args.format))
    return 0


def cmd_translate(args):
    manifest, trace_path = run_eval(args.config, resume=args.resume, progress=not args.quiet,
                                    overrides=_overrides(args, pipeline='translate_only'),
                                    dump_prompts=args.dump_prompts)
    examples = _examples_for(args)
    scores = score_translations(trace_path, examples)
    print('run {} -> {}'.format(manifest.run_id, trace_path))
    print('BLEU {:.1f}  ROUGE-L {:.1f}  (n={})'.format(scores['bleu'], scores['rouge_l'], scores['n']))
    return 0


def _examples_for(args):
    settings = load_run_settings(args.config, check_env=False)
    return prepare_run(settings)[1]


COMMANDS = {
    'run': cmd_run,
    'score': cmd_score,
    'report': cmd_report,
    'translate': cmd_translate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    init_logging(logging.DEBUG if args.verbose else logging.INFO)
    install_excepthook()
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        error('{} failed: {}'.format(args.command, exc), exc if args.verbose else None)
        return 1
    except KeyboardInterrupt:
        logger.warning('Interrupted, rerun with --resume to continue')
        return 130
