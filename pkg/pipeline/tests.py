import json
import os
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.exceptions import ImproperlyConfigured
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from llm_gateway.audit import read_audit, usage_totals
from llm_gateway.backends import ScriptedBackend
from llm_gateway.gateway import complete
from llm_gateway.models import ChatRequest, ScriptEntry
from rl_reward.sandbox import read_metrics
from sft_synthesis.models import Provenance, find_schema_marker
from verifier.checks import verify_exact

from .config import RunConfig, interpolate
from .management.commands.curate import Command as CurateCommand
from .manifest import ManifestError, RunDirectory, StageRecord, StageStatus, file_sha256
from .signals import UsageMeter, metering


FIXTURES = Path(__file__).resolve().parent / 'fixtures'
RUN_CONFIG = FIXTURES / 'run.toml'
CURATION_FIXTURES = FIXTURES.parent.parent / 'curation' / 'fixtures'
MISSING_KEY_ENV = 'REASONING_PIPELINE_TEST_MISSING_KEY'


class RunDirMixin:
    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)

    def run_command(self, name, run_dir, *args, config=RUN_CONFIG):
        out = StringIO()
        call_command(name, '--config', str(config), '--run-dir', str(run_dir), *args, stdout=out)
        return out.getvalue()

    def read_jsonl(self, path):
        return [json.loads(line) for line in Path(path).read_text(encoding='utf-8').splitlines() if line.strip()]

    def read_json(self, path):
        return json.loads(Path(path).read_text(encoding='utf-8'))

    def write_config(self, directory, text):
        path = directory / 'run.toml'
        path.write_text(text, encoding='utf-8')
        return path


class InterpolationTests(SimpleTestCase):
    def test_variable_and_default(self):
        tree = {'url': '${HOST}/v1', 'items': ['${PORT:-8000}'], 'n': 3}
        self.assertEqual(
            interpolate(tree, {'HOST': 'http://localhost'}),
            {'url': 'http://localhost/v1', 'items': ['8000'], 'n': 3},
        )

    def test_set_variable_wins_over_default(self):
        self.assertEqual(interpolate('${PORT:-8000}', {'PORT': '9000'}), '9000')

    def test_missing_variable_is_named(self):
        with self.assertRaisesMessage(ImproperlyConfigured, 'MODEL_HOST'):
            interpolate('${MODEL_HOST}/v1', {})


class RunConfigTests(RunDirMixin, SimpleTestCase):
    def test_fixture_config_resolves_paths_and_roles(self):
        config = RunConfig.from_file(RUN_CONFIG)
        self.assertEqual(config.seed, 7)
        self.assertEqual((config.max_depth, config.max_attempts), (3, 2))
        self.assertTrue(config.path('mcq').exists())
        self.assertEqual(config.roles['probes'], ['probe_a', 'probe_b'])
        self.assertEqual(config.recipe, {'searched': 'all', 'unconverted': 2, 'general': 1})
        self.assertEqual(config.ppo.seed, 7)

    def test_command_line_overrides(self):
        config = RunConfig.from_file(RUN_CONFIG, seed=3, max_depth=1, max_attempts=5)
        self.assertEqual((config.seed, config.max_depth, config.max_attempts), (3, 1, 5))

    def test_reference_preset(self):
        config = RunConfig.from_file(RUN_CONFIG, reference_ppo=True)
        self.assertEqual((config.ppo.clip_range, config.ppo.beta, config.ppo.ppo_epochs), (0.2, 0.03, 3))
        self.assertEqual(config.ppo.batch_size, 128)

    def test_hash_ignores_workers_but_not_seed(self):
        base = RunConfig.from_file(RUN_CONFIG).config_hash()
        self.assertEqual(RunConfig.from_file(RUN_CONFIG, workers=16).config_hash(), base)
        self.assertNotEqual(RunConfig.from_file(RUN_CONFIG, seed=8).config_hash(), base)

    def test_role_pointing_at_unknown_backend(self):
        path = self.write_config(self.make_tempdir(), '[roles]\njudge = "nobody"\n')
        config = RunConfig.from_file(path)
        with self.assertRaisesMessage(ImproperlyConfigured, 'unknown backend "nobody"'):
            config.require_roles('judge')

    def test_unconfigured_role(self):
        config = RunConfig.from_file(self.write_config(self.make_tempdir(), 'seed = 1\n'))
        with self.assertRaisesMessage(ImproperlyConfigured, 'Role "generator" is not configured'):
            config.require_roles('generator')

    def test_invalid_toml(self):
        path = self.write_config(self.make_tempdir(), 'seed = = 1\n')
        with self.assertRaisesMessage(ImproperlyConfigured, 'not valid TOML'):
            RunConfig.from_file(path)

    def test_unknown_ppo_key(self):
        path = self.write_config(self.make_tempdir(), '[ppo]\nlearning_speed = 1.0\n')
        with self.assertRaisesMessage(ImproperlyConfigured, '[ppo]'):
            RunConfig.from_file(path)

    def test_shared_backend_is_built_once(self):
        backends = RunConfig.from_file(RUN_CONFIG).build_backends(('judge', 'reformatter', 'probes'))
        self.assertIs(backends['judge'], backends['reformatter'])
        self.assertEqual([probe.name for probe in backends['probes']], ['probe_a', 'probe_b'])


class RunDirectoryTests(RunDirMixin, SimpleTestCase):
    def setUp(self):
        self.run_dir = RunDirectory(self.make_tempdir() / 'run')

    def test_lock_is_exclusive_and_released(self):
        with self.run_dir.lock():
            with self.assertRaisesMessage(ManifestError, 'in use'):
                with self.run_dir.lock():
                    pass
        with self.run_dir.lock():
            pass

    def test_stale_config_hash_is_refused_unless_forced(self):
        manifest = self.run_dir.load_manifest()
        manifest.config_hash = 'a' * 64
        self.run_dir.save_manifest(manifest)
        with self.assertRaisesMessage(ManifestError, '--force'):
            self.run_dir.check_config('b' * 64)
        self.assertEqual(self.run_dir.check_config('b' * 64, force=True).stages, {})

    def test_changed_artifact_reopens_the_stage(self):
        self.run_dir.write_json('out.json', {'n': 1})
        record = StageRecord('curate', started='now', status=StageStatus.COMPLETE,
                             artifacts=self.run_dir.checksums(['out.json']))
        self.run_dir.record_stage(self.run_dir.load_manifest(), record, 'c' * 64)
        manifest = self.run_dir.load_manifest()
        self.assertTrue(self.run_dir.stage_complete(manifest, 'curate'))
        self.run_dir.write_json('out.json', {'n': 2})
        self.assertFalse(self.run_dir.stage_complete(manifest, 'curate'))

    def test_corrupt_manifest(self):
        self.run_dir.root.mkdir(parents=True)
        self.run_dir.manifest_path.write_text('{not json', encoding='utf-8')
        with self.assertRaises(ManifestError):
            self.run_dir.load_manifest()


class UsageMeterTests(RunDirMixin, SimpleTestCase):
    def test_meter_counts_only_calls_inside_the_block(self):
        backend = ScriptedBackend('gen', [ScriptEntry('t', ['one two three'], repeat=True)])
        request = ChatRequest.from_prompt('four words of prompt', tag='t', temperature=0.0, max_output_tokens=8)
        complete(backend, request)
        meter = UsageMeter()
        with metering(meter):
            complete(backend, request)
            complete(backend, request)
        complete(backend, request)
        self.assertEqual(meter.as_dict(), {'prompt_tokens': 8, 'output_tokens': 6, 'calls': 2})


class CurateCommandTests(RunDirMixin, SimpleTestCase):
    def setUp(self):
        self.run_dir = self.make_tempdir() / 'run'

    def test_fixture_batch(self):
        out = self.run_command('curate', self.run_dir)
        problems = self.read_jsonl(self.run_dir / 'problems.jsonl')
        self.assertEqual([row['id'] for row in problems], ['m07', 'm08', 'm09', 'm10'])
        report = self.read_json(self.run_dir / 'curation_report.json')
        self.assertEqual(report['dropped_by_stage']['challenge_probe'], 3)
        self.assertEqual(report['ingest_errors'], [])
        manifest = self.read_json(self.run_dir / 'manifest.json')
        self.assertEqual(manifest['stages']['curate']['status'], 'complete')
        self.assertEqual(
            manifest['stages']['curate']['artifacts']['problems.jsonl'],
            file_sha256(self.run_dir / 'problems.jsonl'),
        )
        self.assertIn('curate', out)

    def test_rerun_on_completed_run_dir_is_a_noop(self):
        self.run_command('curate', self.run_dir)
        manifest = (self.run_dir / 'manifest.json').read_bytes()
        audit = (self.run_dir / 'audit.jsonl').read_bytes()
        out = self.run_command('curate', self.run_dir)
        self.assertIn('nothing to do', out)
        self.assertEqual((self.run_dir / 'manifest.json').read_bytes(), manifest)
        self.assertEqual((self.run_dir / 'audit.jsonl').read_bytes(), audit)

    def test_stale_config_needs_force(self):
        self.run_command('curate', self.run_dir, '--seed', '1')
        with self.assertRaisesMessage(CommandError, '--force'):
            self.run_command('curate', self.run_dir, '--seed', '2')
        self.run_command('curate', self.run_dir, '--seed', '2', '--force')
        manifest = self.read_json(self.run_dir / 'manifest.json')
        self.assertEqual(manifest['config_hash'], RunConfig.from_file(RUN_CONFIG, seed=2).config_hash())

    def test_locked_run_dir_is_refused(self):
        self.run_dir.mkdir(parents=True)
        (self.run_dir / '.lock').write_text('123\n', encoding='utf-8')
        with self.assertRaisesMessage(CommandError, 'in use'):
            self.run_command('curate', self.run_dir)

    def test_dry_run_renders_prompts_without_calls(self):
        out = self.run_command('curate', self.run_dir, '--dry-run')
        rows = self.read_jsonl(self.run_dir / 'dry_run.jsonl')
        self.assertEqual(len(rows), 10)
        self.assertEqual(rows[0]['tag'], 'probe:m01')
        self.assertIn('Which vitamin deficiency causes scurvy?', rows[0]['prompt'])
        self.assertFalse((self.run_dir / 'audit.jsonl').exists())
        self.assertFalse((self.run_dir / 'manifest.json').exists())
        self.assertIn('dry run', out)

    def test_all_records_dropped_fails_with_stage_report(self):
        workdir = self.make_tempdir()
        mcqs = [
            {'id': f'q{i}', 'question': f'Question number {i} about a common clinical sign?',
             'options': {'A': 'Right', 'B': 'Wrong'}, 'answer_label': 'A', 'source': 'medqa'}
            for i in range(3)
        ]
        (workdir / 'mcq.jsonl').write_text(''.join(json.dumps(row) + '\n' for row in mcqs), encoding='utf-8')
        (workdir / 'script.jsonl').write_text(json.dumps({'tag': '.*', 'reply': '(A)'}) + '\n', encoding='utf-8')
        config = self.write_config(workdir, (
            '[paths]\nmcq = "mcq.jsonl"\n'
            '[backends.easy]\nkind = "scripted"\nscript = "script.jsonl"\n'
            '[roles]\nprobes = ["easy"]\njudge = "easy"\nreformatter = "easy"\n'
        ))
        with self.assertRaisesMessage(CommandError, "'challenge_probe': 3"):
            self.run_command('curate', self.run_dir, config=config)
        report = self.read_json(self.run_dir / 'curation_report.json')
        self.assertEqual(report['output'], 0)
        manifest = self.read_json(self.run_dir / 'manifest.json')
        self.assertEqual(manifest['stages']['curate']['status'], 'failed')

    def test_limit_flags_name_depth_and_attempts(self):
        parser = CurateCommand().create_parser('manage.py', 'curate')
        helps = {action.dest: action.help for action in parser._actions}
        self.assertIn('N, the refinement depth', helps['max_depth'])
        self.assertIn('T, the attempt limit', helps['max_attempts'])

    def zero_probe_config(self):
        script = CURATION_FIXTURES / 'curation_script.jsonl'
        return self.write_config(self.make_tempdir(), (
            f'[paths]\nmcq = "{CURATION_FIXTURES / "mcq_batch.jsonl"}"\n'
            f'[backends.curator]\nkind = "scripted"\nscript = "{script}"\n'
            '[roles]\njudge = "curator"\nreformatter = "curator"\n'
        ))

    def test_runs_without_probes(self):
        self.run_command('curate', self.run_dir, config=self.zero_probe_config())
        problems = self.read_jsonl(self.run_dir / 'problems.jsonl')
        self.assertEqual([row['id'] for row in problems], ['m07', 'm08', 'm09', 'm10'])
        report = self.read_json(self.run_dir / 'curation_report.json')
        self.assertEqual(report['dropped_by_stage']['challenge_probe'], 0)
        self.assertEqual(report['dropped_by_stage']['reformat'], 3)
        manifest = self.read_json(self.run_dir / 'manifest.json')
        self.assertEqual(manifest['stages']['curate']['status'], 'complete')
        tags = [entry['tag'] for entry in read_audit(self.run_dir / 'audit.jsonl')]
        self.assertFalse([tag for tag in tags if tag.startswith('probe:')])

    def test_dry_run_without_probes_renders_judge_prompts(self):
        self.run_command('curate', self.run_dir, '--dry-run', config=self.zero_probe_config())
        rows = self.read_jsonl(self.run_dir / 'dry_run.jsonl')
        self.assertEqual(len(rows), 10)
        self.assertEqual(rows[0]['tag'], 'filter:m01')

    def test_missing_judge_credential_names_the_variable(self):
        workdir = self.make_tempdir()
        config = self.write_config(workdir, (
            f'[paths]\nmcq = "{CURATION_FIXTURES / "mcq_batch.jsonl"}"\n'
            f'[backends.probe]\nkind = "scripted"\nscript = "{CURATION_FIXTURES / "curation_script.jsonl"}"\n'
            '[backends.remote]\nkind = "openai"\nbase_url = "http://localhost:8000"\nmodel = "judge-model"\n'
            f'api_key_env = "{MISSING_KEY_ENV}"\n'
            '[roles]\nprobes = ["probe"]\njudge = "remote"\nreformatter = "probe"\n'
        ))
        with mock.patch.dict(os.environ):
            os.environ.pop(MISSING_KEY_ENV, None)
            with self.assertRaisesMessage(CommandError, MISSING_KEY_ENV):
                self.run_command('curate', self.run_dir, config=config)
        self.assertFalse((self.run_dir / 'manifest.json').exists())


class EndToEndTests(RunDirMixin, SimpleTestCase):
    def run_pipeline(self, run_dir):
        for command in ('curate', 'search', 'synthesize'):
            self.run_command(command, run_dir)

    def test_scripted_pipeline_emits_consistent_dataset(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_pipeline(run_dir)

        split = self.read_json(run_dir / 'split.json')
        self.assertEqual(len(split['search_set']), 3)
        self.assertEqual(len(split['rl_set']), 1)
        summary = self.read_json(run_dir / 'search_summary.json')
        self.assertEqual((summary['succeeded'], summary['failed']), (3, 0))

        records = self.read_jsonl(run_dir / 'sft.jsonl')
        counts = {value: 0 for value in Provenance.values}
        for record in records:
            counts[record['provenance']] += 1
        self.assertEqual(counts, {
            Provenance.SEARCHED: 3, Provenance.UNCONVERTED_MCQ: 2, Provenance.GENERAL_DOMAIN: 1,
        })

        truths = {row['id']: row['ground_truth'] for row in self.read_jsonl(run_dir / 'problems.jsonl')}
        for record in records:
            self.assertIsNone(find_schema_marker(record['complex_cot']))
            if record['provenance'] == Provenance.SEARCHED:
                self.assertIn(record['problem_id'], split['search_set'])
                self.assertTrue(verify_exact(record['response'], truths[record['problem_id']]).value)
            if record['provenance'] == Provenance.UNCONVERTED_MCQ:
                self.assertNotIn(record['problem_id'], truths)

        stats = self.read_json(run_dir / 'sft_stats.json')
        self.assertEqual(stats['record_count'], 6)
        self.assertGreater(stats['mean_cot_tokens'], 0)

    def test_same_seed_gives_byte_identical_dataset(self):
        first, second = self.make_tempdir() / 'a', self.make_tempdir() / 'b'
        self.run_pipeline(first)
        self.run_pipeline(second)
        self.assertEqual((first / 'sft.jsonl').read_bytes(), (second / 'sft.jsonl').read_bytes())

    def test_manifest_usage_matches_audit_log(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_pipeline(run_dir)
        manifest = self.read_json(run_dir / 'manifest.json')
        audit = usage_totals(read_audit(run_dir / 'audit.jsonl'))
        self.assertGreater(audit['requests'], 0)
        self.assertEqual(manifest['usage']['prompt_tokens'], audit['prompt_tokens'])
        self.assertEqual(manifest['usage']['output_tokens'], audit['output_tokens'])
        stage_sum = sum(stage['usage']['output_tokens'] for stage in manifest['stages'].values())
        self.assertEqual(stage_sum, audit['output_tokens'])

    def test_forced_search_resumes_stored_traces(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('curate', run_dir)
        self.run_command('search', run_dir)
        calls = len(read_audit(run_dir / 'audit.jsonl'))
        self.run_command('search', run_dir, '--force')
        self.assertEqual(self.read_json(run_dir / 'search_summary.json')['resumed'], 3)
        self.assertEqual(len(read_audit(run_dir / 'audit.jsonl')), calls)

    def test_search_requires_curated_problems(self):
        with self.assertRaisesMessage(CommandError, 'problems.jsonl'):
            self.run_command('search', self.make_tempdir() / 'run')

    def test_simple_cot_variant(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('curate', run_dir)
        self.run_command('search', run_dir)
        self.run_command('synthesize', run_dir, '--cot-variant', 'simple', '--force')
        report = self.read_json(run_dir / 'synthesis_report.json')
        self.assertEqual((report['cot_variant'], report['synthesized']), ('simple', 3))
        searched = [row for row in self.read_jsonl(run_dir / 'sft.jsonl') if row['provenance'] == 'searched']
        self.assertTrue(all(row['complex_cot'].startswith('Clinical picture. ')
                            or row['complex_cot'].startswith('Chest pain. ')
                            or row['complex_cot'].startswith('Rate control. ')
                            or row['complex_cot'].startswith('Sedation after a party. ')
                            for row in searched))

    def test_decontamination_feeds_search(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('curate', run_dir)
        self.run_command('decontaminate', run_dir)
        report = self.read_json(run_dir / 'decontamination_report.json')
        self.assertEqual([row['id'] for row in report['removed']], ['m08'])
        self.assertEqual(len(self.read_jsonl(run_dir / 'problems_clean.jsonl')), 3)
        self.run_command('search', run_dir)
        split = self.read_json(run_dir / 'split.json')
        self.assertNotIn('m08', split['search_set'] + split['rl_set'])

    def test_synthesize_dry_run_renders_merge_prompts(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('curate', run_dir)
        self.run_command('search', run_dir)
        self.run_command('synthesize', run_dir, '--dry-run')
        rows = self.read_jsonl(run_dir / 'dry_run.jsonl')
        self.assertEqual(len(rows), 3)
        self.assertTrue(all(row['tag'].startswith('merge:') for row in rows))
        self.assertFalse((run_dir / 'sft.jsonl').exists())


class RewardSimCommandTests(RunDirMixin, SimpleTestCase):
    def test_reference_preset_on_toy_bank(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('reward_sim', run_dir, '--paper-config')
        rows = read_metrics(run_dir / 'metrics.jsonl')
        self.assertEqual(len(rows), 200)
        self.assertEqual([row['iter'] for row in rows[:3]], [0, 1, 2])
        summary = self.read_json(run_dir / 'reward_summary.json')
        self.assertEqual((summary['problems'], summary['candidates']), (50, 4))
        self.assertEqual(summary['ppo']['batch_size'], 128)
        self.assertGreater(summary['last_window_reward'], summary['first_window_reward'] + 0.2)
        self.assertGreaterEqual(summary['last_window_reward'], 0.9)

    def test_mined_bank_from_traces(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('curate', run_dir)
        self.run_command('search', run_dir)
        self.run_command('reward_sim', run_dir, '--mine-from-traces', '--candidates', '2')
        bank = self.read_jsonl(run_dir / 'sandbox_bank.jsonl')
        self.assertEqual(len(bank), 3)
        self.assertTrue(all(len(row['candidates']) == 2 for row in bank))


class VerifyEvalCommandTests(RunDirMixin, SimpleTestCase):
    def test_both_methods_match_hand_count(self):
        run_dir = self.make_tempdir() / 'run'
        self.run_command('verify_eval', run_dir, '--method', 'both')
        reports = self.read_json(run_dir / 'verifier_report.json')['reports']
        self.assertEqual(reports['exact_match']['accuracy'], 0.75)
        self.assertEqual(reports['llm_judge']['accuracy'], 0.975)
        self.assertEqual(reports['llm_judge']['confusion'], {'tp': 30, 'fp': 1, 'tn': 9, 'fn': 0})

    def test_exact_match_needs_no_judge(self):
        workdir = self.make_tempdir()
        samples = FIXTURES.parent.parent / 'verifier' / 'fixtures' / 'annotated_samples.jsonl'
        config = self.write_config(workdir, f'[paths]\nsamples = "{samples}"\n')
        self.run_command('verify_eval', workdir / 'run', '--method', 'exact_match', config=config)
        reports = self.read_json(workdir / 'run' / 'verifier_report.json')['reports']
        self.assertEqual(list(reports), ['exact_match'])
