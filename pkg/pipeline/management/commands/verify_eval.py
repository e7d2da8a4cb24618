from llm_gateway.prompts import render_prompt
from pipeline.base import PipelineCommand
from verifier.checks import evaluate_verifier, load_samples
from verifier.models import VerifyMethod


BOTH = 'both'


class Command(PipelineCommand):
    help = 'Score the verifier against a hand-labelled sample file (verifier_report.json)'
    stage = 'verify_eval'

    def add_stage_arguments(self, parser):
        parser.add_argument('--method', choices=[*VerifyMethod.values, BOTH], default=BOTH,
                            help='Verifier method to evaluate')

    def methods(self, options):
        if options['method'] == BOTH:
            return [VerifyMethod.EXACT_MATCH, VerifyMethod.LLM_JUDGE]
        return [VerifyMethod(options['method'])]

    def required_roles(self, config, options):
        return ('verifier',) if VerifyMethod.LLM_JUDGE in self.methods(options) else ()

    def render_prompts(self, config, run_dir, options):
        if VerifyMethod.LLM_JUDGE not in self.methods(options):
            return []
        return [
            {
                'tag': f'verifier:{sample.problem_id}',
                'prompt': render_prompt(
                    'verifier', Model_Response=sample.model_answer, Ground_true_Answer=sample.ground_truth,
                ),
            }
            for sample in load_samples(config.path('samples')).records
        ]

    def execute_stage(self, config, run_dir, backends, options):
        ingested = load_samples(config.path('samples'))
        reports = {
            str(method): evaluate_verifier(ingested.records, method, backends.get('verifier'), config.workers)
            for method in self.methods(options)
        }
        payload = {
            'samples': len(ingested.records),
            'rejected_at_ingest': [error.as_dict() for error in ingested.errors],
            'reports': {method: report.as_dict() for method, report in reports.items()},
        }
        run_dir.write_json('verifier_report.json', payload)
        counters = {f'{method}_accuracy': report.accuracy for method, report in reports.items()}
        counters['samples'] = len(ingested.records)
        return counters, ['verifier_report.json']
