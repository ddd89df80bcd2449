"""End-to-end demo on the bundled sample with a scripted model, no network or keys needed.

Usage:  python3 example.py [--verbose]
"""
import argparse
import logging
import re
import sys
import tempfile
from dataclasses import replace

from dialectqa import ScriptedBackend
from dialectqa.config import load_run_settings
from dialectqa.datasets import load_privacyqa, load_variants
from dialectqa.log import init_logging
from dialectqa.runner import render_report, run_eval, score_run, score_translations

WORD = re.compile(r'[a-z]{4,}')


def words(text):
    return set(WORD.findall(text.lower()))


def scripted_model(sae_by_variant):
    """Word-overlap 'model' that answers every prompt the protocol sends"""

    def respond(request):
        step = request.request_tag.split(':')[2].rstrip('0123456789')
        system, user = request.prompt.system, request.prompt.messages[-1].content
        if step == 'translate':
            return sae_by_variant.get(user, user)
        if step == 'answer':
            segment, question = user.split('\n\nQuestion:\n')
            label = 'Relevant' if words(segment) & words(question) else 'Irrelevant'
            return 'Checked the segment against the question.\nLabel: {}'.format(label)
        if step == 'evaluate':
            if "as 'Irrelevant'" in system and 'access' in system:
                return "'It is access to' asks who can access the information.\nDisagree"
            return 'The classification matches the dialectal question.\nAgree'
        return 'The existential reading changes the question.\nFinal Label: Relevant'

    return respond


def main():
    parser = argparse.ArgumentParser(description='Scripted demo run')
    parser.add_argument('--verbose', action='store_true', help='Print verbose messages during operation')
    args = parser.parse_args()
    init_logging(logging.DEBUG if args.verbose else logging.WARNING)

    settings = load_run_settings('run.yml', check_env=False)
    examples = load_privacyqa(settings.dataset)
    variants = load_variants(settings.variants)
    sae_by_variant = {variants[example.example_id]: example.question for example in examples}
    backend = ScriptedBackend(responder=scripted_model(sae_by_variant))

    with tempfile.TemporaryDirectory() as output_dir:
        trace_paths = []
        for dialect, variant_path in (('sae', None), (settings.dialect, settings.variants)):
            run = replace(settings, dialect=dialect, variants=variant_path, output_dir=output_dir,
                          run_id='demo-' + dialect, workers=1)
            manifest, trace_path = run_eval(run, backend=backend, progress=False)
            print('{}: {}'.format(dialect, manifest.counts))
            trace_paths.append(trace_path)

        sys.stdout.write('\n' + render_report(score_run(trace_paths, settings.dataset)))

        translate = replace(settings, pipeline='translate_only', output_dir=output_dir, run_id='demo-translate')
        _, trace_path = run_eval(translate, backend=backend, progress=False)
        paired = [replace(example, sae_reference_question=example.question) for example in examples]
        scores = score_translations(trace_path, paired)
        print('\ntranslation BLEU {:.1f} ROUGE-L {:.1f}'.format(scores['bleu'], scores['rouge_l']))
        print('backend calls: {}'.format(backend.calls))


if __name__ == '__main__':
    main()
