from llm_gateway.prompts import render_prompt
from pipeline.base import PipelineCommand
from pipeline.config import ALL
from pipeline.stages import load_success_set
from problem_bank.bank import RecordFormat, ingest
from sft_synthesis.dataset import assemble_dataset, emit, load_general_records
from sft_synthesis.models import CotVariant, DatasetRecipe
from sft_synthesis.synthesis import SynthesisConfig, render_merge_prompt, simple_cot, synthesize
from verifier.checks import make_verifier
from verifier.models import VerifyMethod


class Command(PipelineCommand):
    help = 'Merge successful trajectories into complex CoTs, add responses, and emit the SFT mix (sft.jsonl)'
    stage = 'synthesize'

    def add_stage_arguments(self, parser):
        parser.add_argument('--cot-variant', choices=CotVariant.values, help='Reasoning kept in each record')

    def configure(self, config, options):
        if options.get('cot_variant'):
            config.cot_variant = options['cot_variant']

    def required_roles(self, config, options):
        if config.verifier_method == VerifyMethod.LLM_JUDGE:
            return ('generator', 'verifier')
        return ('generator',)

    def render_prompts(self, config, run_dir, options):
        rows = []
        for problem, trace in load_success_set(run_dir):
            if config.cot_variant == CotVariant.SIMPLE:
                prompt = render_prompt('generate_response', Complex_CoT=simple_cot(trace), Question=problem.question)
                rows.append({'tag': f'response:{problem.id}', 'prompt': prompt})
            else:
                rows.append({'tag': f'merge:{problem.id}', 'prompt': render_merge_prompt(problem, trace)})
        return rows

    def load_sources(self, config, run_dir):
        recipe = config.recipe
        mcqs, general = [], []
        if recipe['unconverted'] != 0:
            mcqs = ingest(config.path('mcq'), RecordFormat.MCQ_JSON).records
        if recipe['general'] != 0:
            general = load_general_records(config.path('general')).records
        converted = ingest(run_dir.path('problems.jsonl'), RecordFormat.VERIFIABLE_JSON).records
        converted_ids = {problem.origin_mcq_id or problem.id for problem in converted}
        return mcqs, general, converted_ids

    def execute_stage(self, config, run_dir, backends, options):
        success_set = load_success_set(run_dir)
        synthesis = SynthesisConfig(
            generator=backends['generator'],
            verify=make_verifier(config.verifier_method, backends.get('verifier')),
            cot_variant=config.cot_variant,
            workers=config.workers,
        )
        searched, skips = synthesize(success_set, synthesis)

        mcqs, general, converted_ids = self.load_sources(config, run_dir)
        pool_size = len([mcq for mcq in mcqs if mcq.id not in converted_ids])
        counts = {'searched': len(searched), 'unconverted': pool_size, 'general': len(general)}
        recipe = DatasetRecipe(**{
            name: counts[name] if value == ALL else value for name, value in config.recipe.items()
        })
        dataset = assemble_dataset(searched, mcqs, general, recipe, config.seed, converted_ids=converted_ids)

        stats = emit(dataset, run_dir.path('sft.jsonl'))
        run_dir.write_json('sft_stats.json', stats.as_dict())
        run_dir.write_json('synthesis_report.json', {
            'cot_variant': str(config.cot_variant),
            'success_set': len(success_set),
            'synthesized': len(searched),
            'skipped': [skip.as_dict() for skip in skips],
            'recipe': recipe.as_dict(),
        })
        counters = {
            'success_set': len(success_set),
            'synthesized': len(searched),
            'skipped': len(skips),
            'records': stats.record_count,
        }
        return counters, ['sft.jsonl', 'sft_stats.json', 'synthesis_report.json']
