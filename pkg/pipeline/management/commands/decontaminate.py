from pipeline.base import PipelineCommand
from problem_bank.bank import RecordFormat, dump_records, ingest
from problem_bank.decontamination import decontaminate, read_eval_texts
from problem_bank.serializers import RemovedRecordSerializer


class Command(PipelineCommand):
    help = 'Remove curated problems that share a long character window with any eval item'
    stage = 'decontaminate'

    def execute_stage(self, config, run_dir, backends, options):
        problems = ingest(run_dir.path('problems.jsonl'), RecordFormat.VERIFIABLE_JSON).records
        eval_texts = read_eval_texts(config.path('eval'))
        result = decontaminate(problems, eval_texts, config.decontamination_window, config.include_answer)

        dump_records(result.kept, run_dir.path('problems_clean.jsonl'))
        run_dir.write_json('decontamination_report.json', {
            'window': config.decontamination_window,
            'include_answer': config.include_answer,
            'eval_items': len(eval_texts),
            'kept': len(result.kept),
            'removed': RemovedRecordSerializer(result.removed, many=True).data,
        })
        counters = {'problems': len(problems), 'kept': len(result.kept), 'removed': len(result.removed)}
        return counters, ['problems_clean.jsonl', 'decontamination_report.json']
