import tempfile
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase

from llm_gateway.backends import ScriptedBackend
from llm_gateway.models import ScriptEntry
from problem_bank.bank import RecordFormat, dump_records, ingest
from problem_bank.models import McqRecord

from .models import PROBE_ERROR, ChallengeProbeResult, Stage, Suitability
from .stages import (
    CurationConfig,
    ReformatError,
    judge_suitability,
    parse_probe_letter,
    parse_reformat_reply,
    parse_verdict,
    probe_challenge,
    reformat_open_ended,
    run_curation,
)


FIXTURES = Path(__file__).resolve().parent / 'fixtures'

LONG_STEM = (
    'A 40-year-old patient presents to the clinic with a two-week history of symptoms '
    'that have progressively worsened despite rest and simple analgesia. '
)


def reformat_reply(question, answer):
    return (
        '```json\n{"Open-ended Verifiable Question": "%s", "Standard Answer": "%s"}\n```' % (question, answer)
    )


class CurationTestMixin:
    def create_mcq(self, mcq_id='q1', question=None, answer_label='B'):
        return McqRecord(
            id=mcq_id,
            question=question or LONG_STEM + 'Which enzyme phosphorylates glucose in muscle?',
            options={'A': 'Glucokinase', 'B': 'Hexokinase', 'C': 'Pyruvate kinase', 'D': 'Enolase', 'E': 'Aldolase'},
            answer_label=answer_label,
        )

    def scripted(self, name, *entries):
        return ScriptedBackend(name, [ScriptEntry(tag, replies, repeat=repeat) for tag, replies, repeat in entries])

    def script_backend(self, name='script'):
        return ScriptedBackend.from_file(name, FIXTURES / 'curation_script.jsonl')

    def fixture_config(self, **overrides):
        options = {
            'judge': self.script_backend('judge'),
            'reformatter': self.script_backend('reformatter'),
            'probes': [self.script_backend(f'probe{i}') for i in range(1, 4)],
            'workers': 3,
        }
        options.update(overrides)
        return CurationConfig(**options)


class ProbeLetterTests(SimpleTestCase):
    LABELS = {label: label for label in 'ABCDE'}

    # (reply, expected letter), hand-labelled.
    PHRASINGS = [
        ('The answer is (B).', 'B'),
        ('B', 'B'),
        ('B.', 'B'),
        ('(C) Hexokinase', 'C'),
        ('Answer: D', 'D'),
        ('I think the correct answer is option A because of the enzyme kinetics.', 'A'),
        ('Final answer: (E)', 'E'),
        ("After considering each choice, I'd pick option C.", 'C'),
        ('Let me think. Glucokinase is liver-specific, so hexokinase fits. The answer is B', 'B'),
        ("It's (A), since the other options are wrong.", 'A'),
        ('D) Vitamin K deficiency', 'D'),
        ('The answer is: C', 'C'),
        ('I cannot determine the answer.', None),
        ('The answer is G', None),
        ('Between A and B, I choose B', 'B'),
        ('**Answer: (A)**', 'A'),
        ('The correct option is B, hexokinase.', 'B'),
        ('Hexokinase (B) is correct.', 'B'),
        ('C: Insulin resistance', 'C'),
        ('The answer is (B), not (C).', 'B'),
        ('A reasonable pick here would be C', 'C'),
        ('A patient with these findings most likely has D.', 'D'),
    ]

    def test_phrasings(self):
        self.assertEqual(len(self.PHRASINGS), 22)
        for reply, expected in self.PHRASINGS:
            with self.subTest(reply=reply):
                self.assertEqual(parse_probe_letter(reply, self.LABELS), expected)


class ProbeChallengeTests(CurationTestMixin, SimpleTestCase):
    def test_all_probes_correct(self):
        probes = [self.scripted(f'p{i}', (r'probe:.*', ['The answer is (B).'], True)) for i in range(3)]
        result = probe_challenge(self.create_mcq(), probes)
        self.assertEqual(result.probe_answers, {'p0': 'B', 'p1': 'B', 'p2': 'B'})
        self.assertTrue(result.all_correct)

    def test_leading_article_is_not_read_as_option_a(self):
        probes = [self.scripted('p0', (r'probe:.*', ['A reasonable pick here would be C'], True))]
        result = probe_challenge(self.create_mcq(answer_label='A'), probes)
        self.assertEqual(result.probe_answers, {'p0': 'C'})
        self.assertFalse(result.all_correct)

    def test_unparseable_reply_counts_as_incorrect(self):
        probes = [
            self.scripted('p0', (r'probe:.*', ['The answer is (B).'], True)),
            self.scripted('p1', (r'probe:.*', ['No idea.'], True)),
        ]
        result = probe_challenge(self.create_mcq(), probes)
        self.assertIsNone(result.probe_answers['p1'])
        self.assertFalse(result.all_correct)

    def test_failed_probe_is_marked_error(self):
        result = probe_challenge(self.create_mcq(), [self.scripted('p0', (r'other', ['x'], True))])
        self.assertEqual(result.probe_answers, {'p0': PROBE_ERROR})
        self.assertFalse(result.all_correct)

    def test_zero_probes_is_not_all_correct(self):
        result = probe_challenge(self.create_mcq(), [])
        self.assertEqual(result.probe_answers, {})
        self.assertFalse(result.all_correct)
        self.assertFalse(ChallengeProbeResult('x', 'A').as_dict()['all_correct'])

    def test_probe_prompt_lists_options(self):
        seen = []
        probe = self.scripted('p0', (r'probe:q1:p0', ['B'], True))
        original_send = probe.send

        def spy(request):
            seen.append(request.prompt)
            return original_send(request)

        probe.send = spy
        probe_challenge(self.create_mcq(), [probe])
        self.assertIn('A. Glucokinase\nB. Hexokinase', seen[0])


class JudgeSuitabilityTests(CurationTestMixin, SimpleTestCase):
    # (judge output, expected verdict), hand-labelled.
    OUTPUTS = [
        ('Pass', Suitability.PASS),
        ('"Ambiguous Answer"', Suitability.AMBIGUOUS_ANSWER),
        ('Evaluation: "Too Simple" - this is a recall question.', Suitability.TOO_SIMPLE),
        ('The question asks which is NOT correct, so: Ambiguous Answer.', Suitability.AMBIGUOUS_ANSWER),
        ('not reformulatable', Suitability.NOT_REFORMULATABLE),
        ('**Pass**. The question requires multi-step reasoning.', Suitability.PASS),
        ('This question is Not Reformulatable because the answer is an image finding.',
         Suitability.NOT_REFORMULATABLE),
        ('PASS', Suitability.PASS),
        ('I would mark it as "Too Simple."', Suitability.TOO_SIMPLE),
        ('Ambiguous answer; multiple options are defensible. It would not pass.', Suitability.AMBIGUOUS_ANSWER),
        ('The question meets all criteria. Evaluation: Pass', Suitability.PASS),
        ('I am not sure.', None),
    ]

    def test_judge_outputs(self):
        for output, expected in self.OUTPUTS:
            with self.subTest(output=output):
                self.assertEqual(parse_verdict(output), expected)

    def test_unparseable_after_retries(self):
        judge = self.scripted('judge', (r'filter:.*', ['Hmm.', 'Still thinking.', 'No comment.'], False))
        verdict = judge_suitability(self.create_mcq(), judge, retries=2)
        self.assertEqual(verdict.verdict, Suitability.NOT_REFORMULATABLE)
        self.assertEqual(verdict.reason, 'unparseable')
        self.assertEqual(verdict.raw_judge_output, 'No comment.')

    def test_retry_recovers(self):
        judge = self.scripted('judge', (r'filter:.*', ['Hmm.', 'Too Simple'], False))
        self.assertEqual(judge_suitability(self.create_mcq(), judge, retries=1).verdict, Suitability.TOO_SIMPLE)


class ReformatTests(CurationTestMixin, SimpleTestCase):
    QUESTION = 'Which enzyme phosphorylates glucose in skeletal muscle?'

    # Raw reformatter replies: (reply, expected (question, answer) or None).
    REPLIES = [
        (reformat_reply(QUESTION, 'Hexokinase'), (QUESTION, 'Hexokinase')),
        (reformat_reply(QUESTION, 'Hexokinase') + '\nI kept the answer short.', (QUESTION, 'Hexokinase')),
        ('Sure: {"Open-ended Verifiable Question": "%s", "Standard Answer": "Hexokinase"} done.' % QUESTION,
         (QUESTION, 'Hexokinase')),
        ('```json\n{"Open-ended Verifiable Question": "%s"}\n```' % QUESTION, None),
        ('```\n{"Open-ended Verifiable Question": "%s", "Standard Answer": "HK1"}\n```' % QUESTION,
         (QUESTION, 'HK1')),
        ('```json\n{"Open-ended Verifiable Question": "%s", "Standard Answer": }\n```' % QUESTION, None),
        (reformat_reply(QUESTION, 'Hexokinase').replace('"Hexokinase"', '"Hexokinase I"'), (QUESTION, 'Hexokinase I')),
        ('{"Open-ended Verifiable Question": "%s", "Standard Answer": "Hexokinase", "Notes": "x"}' % QUESTION,
         (QUESTION, 'Hexokinase')),
        (reformat_reply(QUESTION, ''), None),
        ('The question cannot be rewritten.', None),
    ]

    def test_reply_corpus(self):
        for reply, expected in self.REPLIES:
            with self.subTest(reply=reply):
                if expected is None:
                    with self.assertRaises(ReformatError):
                        parse_reformat_reply(reply)
                else:
                    self.assertEqual(parse_reformat_reply(reply), expected)

    def test_builds_problem_from_mcq(self):
        reformatter = self.scripted('r', (r'reformat:q1', [reformat_reply(self.QUESTION, 'Hexokinase')], True))
        problem = reformat_open_ended(self.create_mcq(), reformatter)
        self.assertEqual(problem.question, self.QUESTION)
        self.assertEqual(problem.ground_truth, 'Hexokinase')
        self.assertEqual(problem.origin_mcq_id, 'q1')
        self.assertEqual(problem.tags, ('synthetic',))

    def test_missing_answer_retried_then_dropped(self):
        bad = '```json\n{"Open-ended Verifiable Question": "Which enzyme?"}\n```'
        reformatter = self.scripted('r', (r'reformat:.*', [bad, bad, bad], False))
        with self.assertRaises(ReformatError) as ctx:
            reformat_open_ended(self.create_mcq(), reformatter, retries=2)
        self.assertIn('Standard Answer', str(ctx.exception))

    def test_retry_then_success(self):
        reformatter = self.scripted('r', (
            r'reformat:.*', ['no json here', reformat_reply(self.QUESTION, 'Hexokinase')], False,
        ))
        self.assertEqual(reformat_open_ended(self.create_mcq(), reformatter, retries=1).ground_truth, 'Hexokinase')

    def test_surviving_option_list_is_rejected(self):
        question = 'Which enzyme?\\nA) Glucokinase\\nB) Hexokinase'
        reformatter = self.scripted('r', (r'reformat:.*', [reformat_reply(question, 'Hexokinase')], True))
        with self.assertRaises(ReformatError) as ctx:
            reformat_open_ended(self.create_mcq(), reformatter)
        self.assertIn('question', str(ctx.exception))


class RunCurationTests(CurationTestMixin, SimpleTestCase):
    def setUp(self):
        result = ingest(FIXTURES / 'mcq_batch.jsonl', RecordFormat.MCQ_JSON)
        self.assertEqual(result.errors, [])
        self.mcqs = result.records

    def test_fixture_batch_stage_counts(self):
        problems, report = run_curation(self.mcqs, self.fixture_config())
        self.assertEqual([problem.id for problem in problems], ['m07', 'm08', 'm09', 'm10'])
        counts = report.stage_counts()
        self.assertEqual(counts[Stage.CHALLENGE_PROBE], 3)
        self.assertEqual(counts[Stage.LENGTH_FILTER], 2)
        self.assertEqual(counts[Stage.SUITABILITY_JUDGE], 1)
        self.assertEqual(counts[Stage.REFORMAT], 0)
        self.assertEqual(report.input_count, report.output_count + sum(counts.values()))
        self.assertEqual([problem.ground_truth for problem in problems],
                         ['TSH receptor', 'Aortic dissection', 'Warfarin', 'Naloxone'])
        judge_drop = [drop for drop in report.drops if drop.stage == Stage.SUITABILITY_JUDGE][0]
        self.assertEqual((judge_drop.mcq_id, judge_drop.reason), ('m06', 'Ambiguous Answer'))

    def test_all_easy_batch_drops_everything_at_probe(self):
        probes = [self.scripted(f'p{i}', (r'probe:.*', ['The answer is (B).'], True)) for i in range(3)]
        mcqs = [self.create_mcq(f'q{i}') for i in range(4)]
        problems, report = run_curation(mcqs, self.fixture_config(probes=probes))
        self.assertEqual(problems, [])
        self.assertEqual(report.stage_counts()[Stage.CHALLENGE_PROBE], 4)

    def test_duplicate_questions_are_dropped(self):
        reformatter = self.scripted('r', (
            r'reformat:.*',
            [reformat_reply('Which enzyme traps glucose?', 'Hexokinase'),
             reformat_reply('which  ENZYME traps glucose?', 'Hexokinase')],
            False,
        ))
        judge = self.scripted('judge', (r'filter:.*', ['Pass'], True))
        config = CurationConfig(judge=judge, reformatter=reformatter, workers=1)
        problems, report = run_curation([self.create_mcq('q1'), self.create_mcq('q2')], config)
        self.assertEqual([problem.id for problem in problems], ['q1'])
        self.assertEqual(report.drops[0].stage, Stage.DEDUP)
        report.clean()

    def test_unexpected_failure_is_counted_as_error(self):
        with mock.patch('curation.stages.judge_suitability', side_effect=RuntimeError('judge crashed')):
            problems, report = run_curation(self.mcqs, self.fixture_config())
        counts = report.stage_counts()
        self.assertEqual(problems, [])
        self.assertEqual(counts[Stage.CHALLENGE_PROBE], 3)
        self.assertEqual(counts[Stage.LENGTH_FILTER], 2)
        self.assertEqual(counts[Stage.REFORMAT], 0)
        self.assertEqual(counts[Stage.ERROR], 5)
        self.assertIn('judge crashed', report.drops[-1].reason)
        report.clean()

    def test_reruns_are_byte_identical(self):
        outputs = []
        for run in range(2):
            problems, _ = run_curation(self.mcqs, self.fixture_config())
            path = Path(self.make_tempdir()) / 'problems.jsonl'
            dump_records(problems, path)
            outputs.append(path.read_bytes())
        self.assertEqual(outputs[0], outputs[1])

    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return tmp.name
