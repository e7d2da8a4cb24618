import json
import random
import tempfile
from collections import Counter
from pathlib import Path

from django.test import SimpleTestCase

from llm_gateway.backends import ScriptedBackend
from llm_gateway.models import ScriptEntry
from problem_bank.models import VerifiableProblem
from verifier.checks import make_verifier
from verifier.models import Verdict, VerifyMethod

from .models import CotAction, CotStep, Outcome, SearchTrace, Strategy, TrajectoryNode
from .search import AttemptAborted, init_cot, problem_seed, refine, run_stage1, search
from .store import TraceStore
from .strategies import (
    CotFormatError,
    allowed_strategies,
    parse_cot_reply,
    render_search_prompt,
    sample_backtrack_target,
    sample_strategy,
    serialize_history,
)


FIXTURES = Path(__file__).resolve().parent / 'fixtures'

QUESTION = 'Which enzyme phosphorylates glucose on entry into skeletal muscle cells?'


def cot_reply(answer, *, lead=None, thinking=1, conclusion=True):
    steps = list(lead or [])
    for index in range(thinking):
        steps.append({'action': 'Inner Thinking', 'title': f'Step {index + 1}', 'content': f'Reasoning {index + 1}.'})
    if conclusion:
        steps.append({'action': 'Final Conclusion', 'content': answer})
    steps.append({'action': 'Verification', 'content': 'Checked against the question.'})
    return '```json\n' + json.dumps({'CoT': steps}) + '\n```'


WRONG = cot_reply('Glucokinase')
RIGHT = cot_reply('Hexokinase')


class RecordingBackend(ScriptedBackend):
    def __init__(self, name, entries):
        super().__init__(name, entries)
        self.requests = []

    def send(self, request):
        self.requests.append(request)
        return super().send(request)


class CountingVerifier:
    def __init__(self):
        self.tags = []
        self.verify = make_verifier(VerifyMethod.EXACT_MATCH)

    def __call__(self, response, truth, tag='verifier'):
        self.tags.append(tag)
        return self.verify(response, truth, tag)


class SearchTestMixin:
    def create_problem(self, problem_id='p1'):
        return VerifiableProblem(id=problem_id, question=QUESTION, ground_truth='Hexokinase')

    def backend(self, *entries):
        return RecordingBackend('generator', [ScriptEntry(tag, [reply], repeat=True) for tag, reply in entries])

    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)


class StrategySamplingTests(SimpleTestCase):
    def test_uniform_over_four_at_iteration_two(self):
        rng = random.Random(2024)
        counts = Counter(sample_strategy(2, rng) for _ in range(10000))
        self.assertEqual(set(counts), set(Strategy.values) - {Strategy.INIT})
        for strategy, count in counts.items():
            self.assertAlmostEqual(count / 10000, 0.25, delta=0.02, msg=strategy)

    def test_backtracking_only_at_iteration_two(self):
        for seed in range(50):
            rng = random.Random(seed)
            for iteration in (1, 3, 4, 7):
                draws = {sample_strategy(iteration, rng) for _ in range(200)}
                self.assertNotIn(Strategy.BACKTRACKING, draws)

    def test_iteration_one_draws_over_three(self):
        self.assertEqual(
            allowed_strategies(1),
            [Strategy.EXPLORE_NEW_PATH, Strategy.VERIFICATION, Strategy.CORRECTION],
        )

    def test_iteration_zero_rejected(self):
        with self.assertRaises(ValueError):
            allowed_strategies(0)

    def test_backtrack_target_at_iteration_two(self):
        rng = random.Random(7)
        self.assertEqual({sample_backtrack_target(2, rng) for _ in range(100)}, {0})
        targets = {sample_backtrack_target(4, rng) for _ in range(200)}
        self.assertEqual(targets, {0, 1, 2})

    def test_draws_are_seeded(self):
        first = [sample_strategy(2, random.Random(11)) for _ in range(5)]
        second = [sample_strategy(2, random.Random(11)) for _ in range(5)]
        self.assertEqual(first, second)


class ParseCotTests(SimpleTestCase):
    def test_structure_and_answer(self):
        steps, answer = parse_cot_reply(cot_reply('Hexokinase'))
        self.assertEqual(
            [step.action for step in steps],
            [CotAction.INNER_THINKING, CotAction.FINAL_CONCLUSION, CotAction.VERIFICATION],
        )
        self.assertEqual(steps[0].title, 'Step 1')
        self.assertEqual(answer, 'Hexokinase')

    def test_many_thinking_steps_accepted(self):
        steps, _ = parse_cot_reply(cot_reply('Hexokinase', thinking=4))
        self.assertEqual(sum(step.action == CotAction.INNER_THINKING for step in steps), 4)

    def test_last_conclusion_wins(self):
        reply = cot_reply('Hexokinase', lead=[{'action': 'Final Conclusion', 'content': 'Glucokinase'}])
        self.assertEqual(parse_cot_reply(reply)[1], 'Hexokinase')

    def test_missing_conclusion(self):
        with self.assertRaises(CotFormatError):
            parse_cot_reply(cot_reply('x', conclusion=False))

    def test_thinking_without_title(self):
        reply = json.dumps({'CoT': [
            {'action': 'Inner Thinking', 'content': 'no title'},
            {'action': 'Final Conclusion', 'content': 'Hexokinase'},
        ]})
        with self.assertRaises(CotFormatError):
            parse_cot_reply(reply)

    def test_unknown_action_and_no_json(self):
        for reply in ('The answer is hexokinase.', json.dumps({'CoT': [{'action': 'Musing', 'content': 'x'}]}),
                      json.dumps({'steps': []})):
            with self.subTest(reply=reply), self.assertRaises(CotFormatError):
                parse_cot_reply(reply)


class HistorySerializationTests(SimpleTestCase):
    def two_nodes(self):
        first = TrajectoryNode(0, Strategy.INIT, [
            CotStep(CotAction.INNER_THINKING, 'Glucokinase is restricted to liver and pancreatic beta cells.',
                    'Enzyme distribution'),
            CotStep(CotAction.FINAL_CONCLUSION, 'Glucokinase'),
            CotStep(CotAction.VERIFICATION, 'The conclusion ignores muscle tissue.'),
        ], 'Glucokinase', verdict=False)
        second = TrajectoryNode(1, Strategy.CORRECTION, [
            CotStep(CotAction.VERIFICATION, 'The previous conclusion is false because muscle lacks glucokinase.'),
            CotStep(CotAction.INNER_THINKING, 'Skeletal muscle phosphorylates glucose with hexokinase.',
                    'Muscle isoenzyme'),
            CotStep(CotAction.FINAL_CONCLUSION, 'Hexokinase'),
            CotStep(CotAction.VERIFICATION, 'Hexokinase is the muscle enzyme.'),
        ], 'Hexokinase', verdict=False)
        return [first, second]

    def test_matches_golden_file(self):
        golden = (FIXTURES / 'history_two_nodes.txt').read_text(encoding='utf-8')
        self.assertEqual(serialize_history(self.two_nodes()), golden)

    def test_prompt_embeds_history_in_order(self):
        problem = VerifiableProblem(id='p1', question=QUESTION, ground_truth='Hexokinase')
        prompt = render_search_prompt(problem, Strategy.VERIFICATION, self.two_nodes())
        self.assertIn(QUESTION, prompt)
        self.assertIn((FIXTURES / 'history_two_nodes.txt').read_text(encoding='utf-8'), prompt)
        self.assertLess(prompt.index('[Iteration 0]'), prompt.index('[Iteration 1]'))
        self.assertNotIn('{Previous_CoT}', prompt)


class InitAndRefineTests(SearchTestMixin, SimpleTestCase):
    def test_init_cot_node(self):
        backend = self.backend((r'search:p1:0:0:init', RIGHT))
        node = init_cot(self.create_problem(), backend)
        self.assertEqual(node.iteration, 0)
        self.assertEqual(node.strategy, Strategy.INIT)
        self.assertEqual(node.answer, 'Hexokinase')
        self.assertEqual(backend.requests[0].temperature, 0.7)
        node.clean()

    def test_malformed_reply_is_reprompted_then_aborts(self):
        backend = self.backend((r'search:.*', cot_reply('x', conclusion=False)))
        with self.assertRaises(AttemptAborted):
            init_cot(self.create_problem(), backend, format_retries=2)
        self.assertEqual(len(backend.requests), 3)

    def test_reprompt_recovers(self):
        backend = RecordingBackend('generator', [
            ScriptEntry(r'search:.*', [cot_reply('x', conclusion=False), RIGHT]),
        ])
        node = init_cot(self.create_problem(), backend, format_retries=2)
        self.assertEqual(node.answer, 'Hexokinase')
        self.assertEqual(len(backend.requests), 2)

    def test_backend_failure_aborts_without_reprompt(self):
        backend = self.backend((r'nothing', RIGHT))
        with self.assertRaises(AttemptAborted):
            init_cot(self.create_problem(), backend, format_retries=2)
        self.assertEqual(len(backend.requests), 1)

    def test_correction_starts_with_verification(self):
        reply = cot_reply('Hexokinase', lead=[{'action': 'Verification', 'content': 'The previous answer is wrong.'}])
        backend = self.backend((r'search:p1:0:1:correction', reply))
        history = [init_cot(self.create_problem(), self.backend((r'.*', WRONG)))]
        node = refine(self.create_problem(), history, Strategy.CORRECTION, backend, random.Random(0))
        self.assertEqual(node.iteration, 1)
        self.assertEqual(node.steps[0].action, CotAction.VERIFICATION)
        self.assertIsNone(node.target_j)
        self.assertIn('[Iteration 0]', backend.requests[0].prompt)

    def test_backtracking_records_target_and_truncates_history(self):
        seed_backend = self.backend((r'.*', WRONG))
        problem = self.create_problem()
        history = [init_cot(problem, seed_backend)]
        history.append(refine(problem, history, Strategy.EXPLORE_NEW_PATH, seed_backend, random.Random(0)))

        backend = self.backend((r'search:p1:0:2:backtracking', RIGHT))
        node = refine(problem, history, Strategy.BACKTRACKING, backend, random.Random(3))
        self.assertEqual(node.target_j, 0)
        self.assertEqual(node.iteration, 2)
        prompt = backend.requests[0].prompt
        self.assertIn('[Iteration 0]', prompt)
        self.assertNotIn('[Iteration 1]', prompt)
        node.clean()

    def test_refine_needs_history(self):
        with self.assertRaises(ValueError):
            refine(self.create_problem(), [], Strategy.CORRECTION, self.backend(), random.Random(0))


class SearchTests(SearchTestMixin, SimpleTestCase):
    def test_success_at_iteration_two(self):
        backend = self.backend((r'search:p1:0:2:.*', RIGHT), (r'search:p1:.*', WRONG))
        verifier = CountingVerifier()
        trace = search(self.create_problem(), backend, verifier, max_depth=3, max_attempts=3, seed=1)

        self.assertEqual(trace.outcome, Outcome.SUCCESS)
        self.assertEqual(trace.success, (0, 2))
        self.assertEqual([node.verdict for node in trace.attempts[0].nodes], [False, False, True])
        self.assertEqual(len(verifier.tags), 3)
        self.assertEqual(trace.final_answer(), 'Hexokinase')
        trace.clean()

    def test_verifier_calls_for_each_success_depth(self):
        for k in range(4):
            with self.subTest(k=k):
                backend = self.backend((rf'search:p1:0:{k}:.*', RIGHT), (r'search:p1:.*', WRONG))
                verifier = CountingVerifier()
                trace = search(self.create_problem(), backend, verifier, max_depth=3, max_attempts=3, seed=k)
                self.assertEqual(trace.success, (0, k))
                self.assertEqual(len(verifier.tags), k + 1)
                self.assertEqual(verifier.tags[-1], f'verifier:p1:0:{k}')

    def test_never_verifying_is_discarded(self):
        backend = self.backend((r'search:p1:.*', WRONG))
        verifier = CountingVerifier()
        trace = search(self.create_problem(), backend, verifier, max_depth=3, max_attempts=3, seed=5)

        self.assertEqual(trace.outcome, Outcome.DISCARDED)
        self.assertIsNone(trace.success)
        self.assertEqual(len(trace.attempts), 3)
        for attempt in trace.attempts:
            self.assertLessEqual(len(attempt.nodes), 4)
            self.assertEqual(attempt.nodes[0].strategy, Strategy.INIT)
        self.assertEqual(len(verifier.tags), sum(len(a.nodes) for a in trace.attempts))
        trace.clean()

    def test_initial_answer_accepted(self):
        backend = self.backend((r'search:p1:0:0:init', RIGHT))
        trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=3, max_attempts=3, seed=0)
        self.assertEqual(trace.success, (0, 0))
        self.assertEqual(len(backend.requests), 1)
        self.assertEqual(list(trace.iter_nodes())[0].strategy, Strategy.INIT)

    def test_success_in_a_later_attempt(self):
        backend = self.backend((r'search:p1:1:0:init', RIGHT), (r'search:p1:.*', WRONG))
        trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=2, max_attempts=3, seed=0)
        self.assertEqual(trace.success, (1, 0))
        self.assertEqual(len(trace.attempts[0].nodes), 3)
        trace.clean()

    def test_backend_failure_aborts_only_the_attempt(self):
        # Attempt 0 has no refinement script, so its first refine fails on the backend.
        backend = self.backend(
            (r'search:p1:0:0:init', WRONG),
            (r'search:p1:1:0:init', WRONG),
            (r'search:p1:1:1:.*', RIGHT),
        )
        trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=3, max_attempts=3, seed=0)
        self.assertEqual(len(trace.attempts[0].nodes), 1)
        self.assertIn('backend failure', trace.attempts[0].abort_reason)
        self.assertEqual(trace.success, (1, 1))
        trace.clean()

    def test_undecided_verdict_counts_as_rejection(self):
        def undecided(response, truth, tag='verifier'):
            return Verdict(None, VerifyMethod.LLM_JUDGE, raw='maybe', error='ambiguous judge reply')

        backend = self.backend((r'search:p1:.*', RIGHT))
        trace = search(self.create_problem(), backend, undecided, max_depth=1, max_attempts=1, seed=0)
        self.assertEqual(trace.outcome, Outcome.DISCARDED)
        node = trace.attempts[0].nodes[0]
        self.assertFalse(node.verdict)
        self.assertEqual(node.verifier_error, 'ambiguous judge reply')

    def test_seeded_runs_are_identical(self):
        def run():
            backend = self.backend((r'search:p1:.*', WRONG))
            trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=3, max_attempts=3, seed=99)
            return json.dumps(trace.as_dict(), sort_keys=True)

        self.assertEqual(run(), run())

    def test_trace_round_trips_through_dict(self):
        backend = self.backend((r'search:p1:0:2:.*', RIGHT), (r'search:p1:.*', WRONG))
        trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=3, max_attempts=3, seed=4)
        self.assertEqual(SearchTrace.from_dict(json.loads(json.dumps(trace.as_dict()))), trace)

    def test_limits_validated(self):
        for depth, attempts in ((0, 3), (3, 0)):
            with self.subTest(depth=depth, attempts=attempts), self.assertRaises(ValueError):
                search(self.create_problem(), self.backend(), CountingVerifier(),
                       max_depth=depth, max_attempts=attempts, seed=0)


class RunStage1Tests(SearchTestMixin, SimpleTestCase):
    def setUp(self):
        self.problems = [self.create_problem(f'p{i}') for i in range(10)]

    def batch_backend(self):
        # p0..p6 verify on the initial CoT, p7..p9 never do.
        return self.backend((r'search:p[0-6]:\d+:0:init', RIGHT), (r'search:.*', WRONG))

    def run_batch(self, store, problems=None, verify=None):
        return run_stage1(
            problems or self.problems, self.batch_backend(), verify or CountingVerifier(), store,
            max_depth=2, max_attempts=1, seed=13, workers=3,
        )

    def test_success_rate(self):
        result = self.run_batch(TraceStore(self.make_tempdir()))
        self.assertEqual(len(result.success_set), 7)
        self.assertEqual([problem.id for problem, _ in result.success_set], [f'p{i}' for i in range(7)])
        summary = result.summary()
        self.assertEqual(summary['succeeded'], 7)
        self.assertEqual(summary['discarded'], 3)
        self.assertAlmostEqual(summary['success_rate'], 0.7)

    def test_strategy_histogram(self):
        result = self.run_batch(TraceStore(self.make_tempdir()))
        histogram = result.summary()['strategy_histogram']

        hand_count = Counter()
        for trace in result.traces:
            for attempt in trace.attempts:
                for node in attempt.nodes:
                    hand_count[node.strategy] += 1
        self.assertEqual(histogram, {strategy: hand_count.get(strategy, 0) for strategy in Strategy.values})
        # Ten initial CoTs plus two refinements for each of the three failures.
        self.assertEqual(histogram[Strategy.INIT], 10)
        self.assertEqual(sum(histogram.values()), 16)

    def test_resume_reproduces_store(self):
        interrupted = self.make_tempdir()
        self.run_batch(TraceStore(interrupted), problems=self.problems[:4])
        resumed = self.run_batch(TraceStore(interrupted))
        self.assertEqual(resumed.resumed, 4)

        uninterrupted = self.make_tempdir()
        self.run_batch(TraceStore(uninterrupted))

        names = sorted(path.name for path in interrupted.iterdir())
        self.assertEqual(names, sorted(path.name for path in uninterrupted.iterdir()))
        self.assertEqual(len(names), 10)
        for name in names:
            self.assertEqual((interrupted / name).read_bytes(), (uninterrupted / name).read_bytes(), name)

    def test_one_failure_does_not_stop_the_batch(self):
        verifier = CountingVerifier()

        def flaky(response, truth, tag='verifier'):
            if tag.startswith('verifier:p3:'):
                raise RuntimeError('judge crashed')
            return verifier(response, truth, tag)

        store = TraceStore(self.make_tempdir())
        result = self.run_batch(store, verify=flaky)
        self.assertEqual(result.failures, [{'problem_id': 'p3', 'error': 'RuntimeError: judge crashed'}])
        self.assertEqual(len(result.success_set), 6)
        self.assertFalse(store.exists('p3'))
        self.assertEqual(result.summary()['failed'], 1)

    def test_per_problem_seed(self):
        result = self.run_batch(TraceStore(self.make_tempdir()))
        self.assertEqual(result.traces[0].rng_seed, problem_seed(13, 'p0'))
        self.assertNotEqual(problem_seed(13, 'p0'), problem_seed(13, 'p1'))


class TraceStoreTests(SearchTestMixin, SimpleTestCase):
    def test_unsafe_ids_get_distinct_files(self):
        store = TraceStore(self.make_tempdir())
        self.assertNotEqual(store.path_for('a/b'), store.path_for('a_b'))
        self.assertEqual(store.path_for('plain-id.1').name, 'plain-id.1.json')

    def test_save_and_load(self):
        store = TraceStore(self.make_tempdir())
        backend = self.backend((r'search:p1:0:0:init', RIGHT))
        trace = search(self.create_problem(), backend, CountingVerifier(), max_depth=3, max_attempts=3, seed=0)
        store.save(trace)
        self.assertEqual(store.load('p1'), trace)
        self.assertIsNone(store.load('missing'))
        self.assertEqual(store.load_many(['missing', 'p1']), [trace])
