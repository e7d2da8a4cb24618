from django.core.management.base import CommandError

from curation.stages import CurationConfig, run_curation
from llm_gateway.prompts import render_prompt
from pipeline.base import PipelineCommand
from problem_bank.bank import RecordFormat, dump_records, ingest


class Command(PipelineCommand):
    help = 'Turn the configured MCQ file into verifiable open-ended problems (problems.jsonl)'
    stage = 'curate'
    roles = ('judge', 'reformatter')

    def required_roles(self, config, options):
        # Probes are optional; without them no record is dropped as too easy.
        if config.roles.get('probes'):
            return ('probes', *self.roles)
        return self.roles

    def render_prompts(self, config, run_dir, options):
        mcqs = ingest(config.path('mcq'), RecordFormat.MCQ_JSON).records
        if not config.roles.get('probes'):
            return [
                {
                    'tag': f'filter:{mcq.id}',
                    'prompt': render_prompt(
                        'filter_mcq', Question=mcq.question, Options=mcq.render_options(),
                        Answer=mcq.render_answer(),
                    ),
                }
                for mcq in mcqs
            ]
        return [
            {
                'tag': f'probe:{mcq.id}',
                'prompt': render_prompt('probe_mcq', Question=mcq.question, Options=mcq.render_options()),
            }
            for mcq in mcqs
        ]

    def execute_stage(self, config, run_dir, backends, options):
        ingested = ingest(config.path('mcq'), RecordFormat.MCQ_JSON)
        curation = CurationConfig(
            judge=backends['judge'],
            reformatter=backends['reformatter'],
            probes=backends.get('probes', []),
            min_question_chars=config.min_question_chars,
            judge_retries=config.judge_retries,
            reformat_retries=config.reformat_retries,
            workers=config.workers,
        )
        problems, report = run_curation(ingested.records, curation)
        report.ingest_errors = [error.as_dict() for error in ingested.errors]

        dump_records(problems, run_dir.path('problems.jsonl'))
        run_dir.write_json('curation_report.json', report.as_dict())
        if not problems:
            raise CommandError(
                f'Curation kept none of {report.input_count} records; dropped by stage: {report.stage_counts()}'
            )
        counters = {
            'ingested': report.input_count,
            'rejected_at_ingest': len(report.ingest_errors),
            'problems': report.output_count,
            'dropped_by_stage': report.stage_counts(),
        }
        return counters, ['problems.jsonl', 'curation_report.json']
