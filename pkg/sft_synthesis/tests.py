import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from llm_gateway.backends import ScriptedBackend
from llm_gateway.models import ScriptEntry
from problem_bank.models import McqRecord, VerifiableProblem
from rl_reward.structure import parse_structure
from trajectory_search.models import CotAction, CotStep, Outcome, SearchAttempt, SearchTrace, Strategy, TrajectoryNode
from verifier.checks import make_verifier
from verifier.models import VerifyMethod

from .dataset import DatasetError, assemble_dataset, compute_stats, emit, load_sft_records, mcq_to_record
from .models import CotVariant, DatasetRecipe, Provenance, SftRecord, SkipStage
from .synthesis import (
    SynthesisConfig,
    SynthesisError,
    generate_response,
    merge_cot,
    render_merge_prompt,
    render_training_text,
    simple_cot,
    synthesize,
)


def character_count(text):
    return len(text)


NATURAL = (
    'Okay, muscle needs to trap glucose first. Glucokinase came to mind, but wait, that one lives in the liver. '
    'Hmm, pyruvate kinase acts much later in glycolysis. So the muscle enzyme has to be hexokinase.'
)


def merge_reply(text):
    return '```json\n' + json.dumps({'NaturalReasoning': text}) + '\n```'


class RecordingBackend(ScriptedBackend):
    def __init__(self, name, entries):
        super().__init__(name, entries)
        self.requests = []

    def send(self, request):
        self.requests.append(request)
        return super().send(request)


class SynthesisTestMixin:
    def create_problem(self, problem_id='p1', ground_truth='Hexokinase'):
        return VerifiableProblem(
            id=problem_id,
            question='Which enzyme phosphorylates glucose on entry into skeletal muscle cells?',
            ground_truth=ground_truth,
        )

    def build_node(self, iteration, strategy, answer, verdict):
        steps = [
            CotStep(CotAction.INNER_THINKING, f'Considering {answer} at iteration {iteration}.', f'Idea {iteration}'),
            CotStep(CotAction.FINAL_CONCLUSION, answer),
            CotStep(CotAction.VERIFICATION, 'Checked.'),
        ]
        return TrajectoryNode(iteration, strategy, steps, answer, verdict=verdict)

    def build_trace(self, problem_id='p1', answers=('Glucokinase', 'Pyruvate kinase', 'Hexokinase')):
        strategies = [Strategy.INIT, Strategy.CORRECTION, Strategy.EXPLORE_NEW_PATH]
        nodes = [
            self.build_node(i, strategies[i], answer, i == len(answers) - 1)
            for i, answer in enumerate(answers)
        ]
        return SearchTrace(
            problem_id, 1, 3, 3, [SearchAttempt(nodes)], outcome=Outcome.SUCCESS, success=(0, len(nodes) - 1),
        )

    def backend(self, *entries):
        return RecordingBackend('generator', [ScriptEntry(tag, replies) for tag, replies in entries])

    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)


class SftRecordTests(SimpleTestCase):
    def test_valid_records(self):
        SftRecord('p1', 'Q?', 'Some reasoning.', 'Answer.').clean()
        SftRecord('m1', 'Q?', '', 'Answer.', Provenance.UNCONVERTED_MCQ).clean()

    def test_invalid_records(self):
        cases = [
            (SftRecord('p1', 'Q?', '', 'Answer.'), 'complex_cot'),
            (SftRecord('m1', 'Q?', 'Reasoning', 'Answer.', Provenance.UNCONVERTED_MCQ), 'complex_cot'),
            (SftRecord('p1', 'Q?', 'Then the Final Conclusion is X', 'Answer.'), 'complex_cot'),
            (SftRecord('p1', 'Q?', 'Reasoning', '   '), 'response'),
            (SftRecord('p1', 'Q?', 'Reasoning', 'Answer.', 'imagined'), 'provenance'),
        ]
        for record, field in cases:
            with self.subTest(record=record), self.assertRaises(ValidationError) as ctx:
                record.clean()
            self.assertIn(field, ctx.exception.message_dict)


class MergeCotTests(SynthesisTestMixin, SimpleTestCase):
    def test_returns_natural_reasoning(self):
        backend = self.backend((r'merge:p1', [merge_reply(NATURAL)]))
        self.assertEqual(merge_cot(self.create_problem(), self.build_trace(), backend), NATURAL)
        self.assertEqual(backend.requests[0].tag, 'merge:p1')

    def test_residual_marker_is_retried(self):
        leaked = 'Inner Thinking: glucose trapping. Final Conclusion: hexokinase.'
        backend = self.backend((r'merge:p1', [merge_reply(leaked), merge_reply(NATURAL)]))
        self.assertEqual(merge_cot(self.create_problem(), self.build_trace(), backend, retries=2), NATURAL)
        self.assertEqual(len(backend.requests), 2)

    def test_persistent_failure_raises(self):
        backend = self.backend((r'merge:p1', ['no json here', '{"Other": 1}', merge_reply('"CoT" leaked')]))
        with self.assertRaises(SynthesisError) as ctx:
            merge_cot(self.create_problem(), self.build_trace(), backend, retries=2)
        self.assertEqual(ctx.exception.stage, SkipStage.MERGE)
        self.assertEqual(len(backend.requests), 3)

    def test_backend_failure_is_not_retried(self):
        backend = self.backend((r'nothing', [merge_reply(NATURAL)]))
        with self.assertRaises(SynthesisError):
            merge_cot(self.create_problem(), self.build_trace(), backend, retries=2)
        self.assertEqual(len(backend.requests), 1)

    def test_prompt_lists_winning_nodes_in_order(self):
        prompt = render_merge_prompt(self.create_problem(), self.build_trace())
        positions = [prompt.index(f'[Iteration {i}]') for i in range(3)]
        self.assertEqual(positions, sorted(positions))
        for answer in ('Glucokinase', 'Pyruvate kinase', 'Hexokinase'):
            self.assertIn(f'Final Conclusion\n{answer}', prompt)
        self.assertIn('Which enzyme phosphorylates glucose', prompt)

    def test_discarded_trace_rejected(self):
        trace = SearchTrace('p1', 1, 3, 3, [SearchAttempt([self.build_node(0, Strategy.INIT, 'Glucokinase', False)])])
        with self.assertRaises(ValueError):
            merge_cot(self.create_problem(), trace, self.backend())


class GenerateResponseTests(SynthesisTestMixin, SimpleTestCase):
    def test_reply_is_the_response(self):
        backend = self.backend((r'response:p1', ['The answer is hexokinase because it is the muscle isoenzyme.']))
        response = generate_response(self.create_problem(), NATURAL, backend)
        self.assertEqual(response, 'The answer is hexokinase because it is the muscle isoenzyme.')
        self.assertIn(NATURAL, backend.requests[0].prompt)

    def test_empty_reply_retried_then_skipped(self):
        backend = self.backend((r'response:p1', ['', 'Hexokinase.']))
        self.assertEqual(generate_response(self.create_problem(), NATURAL, backend, retries=1), 'Hexokinase.')

        backend = self.backend((r'response:p1', ['', '  ', '']))
        with self.assertRaises(SynthesisError) as ctx:
            generate_response(self.create_problem(), NATURAL, backend, retries=2)
        self.assertEqual(ctx.exception.stage, SkipStage.RESPONSE)

    def test_empty_reasoning_rejected(self):
        with self.assertRaises(ValueError):
            generate_response(self.create_problem(), ' ', self.backend())


class SynthesizeTests(SynthesisTestMixin, SimpleTestCase):
    def build_config(self, backend, **overrides):
        options = {'generator': backend, 'verify': make_verifier(VerifyMethod.EXACT_MATCH), 'workers': 2}
        options.update(overrides)
        return SynthesisConfig(**options)

    def test_consistency_gate_drops_contradicting_response(self):
        backend = self.backend(
            (r'merge:p1', [merge_reply(NATURAL)]),
            (r'merge:p2', [merge_reply(NATURAL)]),
            (r'response:p1', ['Hexokinase traps glucose in muscle.']),
            (r'response:p2', ['Glucokinase is the answer.']),
        )
        success_set = [
            (self.create_problem('p1'), self.build_trace('p1')),
            (self.create_problem('p2'), self.build_trace('p2')),
        ]
        records, skips = synthesize(success_set, self.build_config(backend))

        self.assertEqual([record.problem_id for record in records], ['p1'])
        self.assertEqual(records[0].complex_cot, NATURAL)
        self.assertEqual(records[0].provenance, Provenance.SEARCHED)
        self.assertEqual([skip.as_dict()['stage'] for skip in skips], ['consistency'])
        self.assertEqual(skips[0].problem_id, 'p2')

    def test_simple_variant_skips_merge(self):
        backend = self.backend((r'response:p1', ['Hexokinase.']))
        trace = self.build_trace()
        records, skips = synthesize(
            [(self.create_problem(), trace)], self.build_config(backend, cot_variant=CotVariant.SIMPLE),
        )
        self.assertEqual(skips, [])
        self.assertEqual(records[0].complex_cot, simple_cot(trace))
        self.assertEqual([request.tag for request in backend.requests], ['response:p1'])

    def test_simple_cot_uses_initial_node(self):
        text = simple_cot(self.build_trace())
        self.assertEqual(text, 'Idea 0. Considering Glucokinase at iteration 0.\n\nGlucokinase\n\nChecked.')
        self.assertNotIn('Inner Thinking', text)


class TrainingTextTests(SimpleTestCase):
    def test_think_then_answer_layout(self):
        record = SftRecord('p1', 'Q?', NATURAL, 'Hexokinase.')
        text = render_training_text(record)
        parsed = parse_structure(text)
        self.assertEqual(parsed.think, NATURAL)
        self.assertEqual(parsed.answer, 'Hexokinase.')
        self.assertTrue(text.startswith('## Thinking\n'))

    def test_direct_response_form(self):
        record = SftRecord('p1', 'Q?', NATURAL, 'Hexokinase.')
        self.assertEqual(render_training_text(record, include_cot=False), 'Hexokinase.')
        unconverted = SftRecord('m1', 'Q?', '', 'B', Provenance.UNCONVERTED_MCQ)
        self.assertEqual(render_training_text(unconverted), 'B')


class AssembleDatasetTests(SimpleTestCase):
    def setUp(self):
        self.searched = [SftRecord(f's{i}', f'Question {i}?', f'Reasoning {i}.', f'Answer {i}.') for i in range(200)]
        self.mcqs = [
            McqRecord(f'm{i}', f'Exam question {i}?', {'A': f'Wrong {i}', 'B': f'Right {i}'}, 'B') for i in range(60)
        ]
        self.general = [
            SftRecord(f'g{i}', f'General {i}?', f'Thinking {i}.', f'Reply {i}.', Provenance.GENERAL_DOMAIN)
            for i in range(50)
        ]
        self.converted = {f'm{i}' for i in range(10)}

    def assemble(self, recipe, seed=3, general=None):
        return assemble_dataset(
            self.searched, self.mcqs, self.general if general is None else general, recipe, seed,
            converted_ids=self.converted,
        )

    def test_scaled_recipe(self):
        records = self.assemble(DatasetRecipe(searched=200, unconverted=40, general=50))
        self.assertEqual(len(records), 290)
        stats = compute_stats(records)
        self.assertEqual(stats.provenance_counts, {'searched': 200, 'unconverted_mcq': 40, 'general_domain': 50})
        self.assertEqual(len({record.problem_id for record in records}), 290)

    def test_empty_recipe(self):
        self.assertEqual(self.assemble(DatasetRecipe()), [])

    def test_same_seed_same_order(self):
        recipe = DatasetRecipe(searched=30, unconverted=20, general=10)
        first = [record.problem_id for record in self.assemble(recipe)]
        self.assertEqual(first, [record.problem_id for record in self.assemble(recipe)])
        self.assertNotEqual(first, [record.problem_id for record in self.assemble(recipe, seed=4)])

    def test_converted_mcqs_are_not_eligible(self):
        records = self.assemble(DatasetRecipe(unconverted=50))
        ids = {record.problem_id for record in records}
        self.assertFalse(ids & self.converted)
        with self.assertRaises(DatasetError) as ctx:
            self.assemble(DatasetRecipe(unconverted=51))
        self.assertIn('unconverted_mcq', str(ctx.exception))

    def test_insufficient_source_named(self):
        with self.assertRaises(DatasetError) as ctx:
            self.assemble(DatasetRecipe(searched=201))
        self.assertIn('searched', str(ctx.exception))

    def test_cross_source_duplicate(self):
        general = [SftRecord('s0', 'General?', 'Thinking.', 'Reply.', Provenance.GENERAL_DOMAIN)]
        with self.assertRaises(DatasetError):
            self.assemble(DatasetRecipe(searched=200, general=1), general=general)

    def test_negative_recipe(self):
        with self.assertRaises(ValidationError):
            self.assemble(DatasetRecipe(searched=-1))

    def test_mcq_conversion(self):
        record = mcq_to_record(self.mcqs[3])
        self.assertEqual(record.question, 'Exam question 3?\nA. Wrong 3\nB. Right 3')
        self.assertEqual(record.response, 'Right 3')
        self.assertEqual(record.complex_cot, '')
        record.clean()


class EmitTests(SynthesisTestMixin, SimpleTestCase):
    def test_mean_cot_tokens(self):
        records = [
            SftRecord('p1', 'Q1?', ' '.join(['word'] * 10), 'Short answer.'),
            SftRecord('p2', 'Q2?', ' '.join(['word'] * 20), 'Another short answer here.'),
        ]
        stats = emit(records, self.make_tempdir() / 'sft.jsonl')
        self.assertEqual(stats.mean_cot_tokens, 15.0)
        self.assertEqual(stats.mean_response_tokens, 3.0)
        self.assertEqual(stats.mean_total_tokens, 18.0)
        self.assertEqual(stats.token_counter, 'sft_synthesis.tokens.whitespace_tokens')

    def test_unconverted_records_do_not_dilute_cot_mean(self):
        records = [
            SftRecord('p1', 'Q1?', ' '.join(['word'] * 10), 'A.'),
            SftRecord('m1', 'Q2?', '', 'B', Provenance.UNCONVERTED_MCQ),
        ]
        self.assertEqual(compute_stats(records).mean_cot_tokens, 10.0)

    def test_searched_cots_longer_than_responses(self):
        records = [
            SftRecord(f'p{i}', 'Q?', ' '.join([NATURAL] * 8), 'Hexokinase is the answer.') for i in range(5)
        ]
        stats = compute_stats(records)
        self.assertGreater(stats.mean_cot_tokens, 100)
        self.assertGreater(stats.mean_cot_tokens, stats.mean_response_tokens)

    def test_pluggable_counter(self):
        records = [SftRecord('p1', 'Q?', 'abc def', 'xy')]
        with override_settings(PIPELINE={**settings.PIPELINE, 'TOKEN_COUNTER': 'sft_synthesis.tests.character_count'}):
            stats = compute_stats(records)
        self.assertEqual(stats.mean_cot_tokens, 7.0)
        self.assertEqual(stats.token_counter, 'sft_synthesis.tests.character_count')

    def test_emit_then_load(self):
        records = [
            SftRecord('p1', 'Q1?', 'Line one.\nLine two.', 'Answer ✓.'),
            SftRecord('m1', 'Q2?\nA. x\nB. y', '', 'y', Provenance.UNCONVERTED_MCQ),
        ]
        path = self.make_tempdir() / 'sft.jsonl'
        emit(records, path)
        loaded = load_sft_records(path)
        self.assertEqual(loaded.errors, [])
        self.assertEqual(loaded.records, records)
        self.assertEqual(json.loads(path.read_text(encoding='utf-8').splitlines()[0])['provenance'], 'searched')

    def test_io_error_is_fatal(self):
        target = self.make_tempdir() / 'sft.jsonl'
        target.mkdir()
        with self.assertRaises(OSError):
            emit([SftRecord('p1', 'Q?', 'R.', 'A.')], target)
