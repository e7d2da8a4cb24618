from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from llm_gateway.backends import ScriptedBackend
from llm_gateway.models import ScriptEntry

from .checks import evaluate_verifier, load_samples, normalize_answer, read_judge_reply, verify_exact, verify_llm
from .models import AnnotatedSample, Verdict, VerifyMethod


FIXTURES = Path(__file__).resolve().parent / 'fixtures'


class ExactMatchTests(SimpleTestCase):
    def test_normalization(self):
        self.assertEqual(normalize_answer('  Answer:\tHexo-Kinase.  '), 'answer hexo kinase')

    def test_punctuated_answer_matches(self):
        self.assertTrue(verify_exact('Answer: Hexokinase.', 'hexokinase').value)

    def test_alias_is_missed(self):
        verdict = verify_exact('acetylsalicylic acid', 'aspirin')
        self.assertFalse(verdict.value)
        self.assertEqual(verdict.method, VerifyMethod.EXACT_MATCH)

    def test_empty_response_is_false(self):
        self.assertFalse(verify_exact('', 'aspirin').value)

    def test_padding_never_changes_verdict(self):
        cases = [('The answer is aspirin', 'Aspirin'), ('give naloxone', 'flumazenil')]
        for response, truth in cases:
            expected = verify_exact(response, truth).value
            for padded_response, padded_truth in [
                (f'  {response}  ', truth),
                (f'...{response}!!', f'"{truth}"'),
                (response, f'\n{truth}.\n'),
            ]:
                self.assertEqual(verify_exact(padded_response, padded_truth).value, expected)

    def test_extension_keeps_true(self):
        truth = 'Radial nerve'
        response = 'radial nerve'
        for suffix in ['', ' injury at the spiral groove', ', most likely.']:
            self.assertTrue(verify_exact(response + suffix, truth).value)
            self.assertTrue(verify_exact('It is the ' + response + suffix, truth).value)


class JudgeTests(SimpleTestCase):
    def build_judge(self, *replies, repeat=False):
        return ScriptedBackend('judge', [ScriptEntry(r'verifier.*', list(replies), repeat=repeat)])

    def test_reply_mapping(self):
        self.assertTrue(read_judge_reply('TRUE'))
        self.assertFalse(read_judge_reply('The response is False.'))
        self.assertIsNone(read_judge_reply('True or False'))
        self.assertIsNone(read_judge_reply('It matches.'))

    def test_scripted_false(self):
        verdict = verify_llm('It is glucokinase', 'hexokinase', self.build_judge('False', repeat=True))
        self.assertFalse(verdict.value)
        self.assertEqual(verdict.method, VerifyMethod.LLM_JUDGE)
        self.assertEqual(verdict.raw, 'False')
        verdict.clean()

    def test_identical_text_is_true(self):
        verdict = verify_llm('Aortic dissection', 'Aortic dissection', self.build_judge('True', repeat=True))
        self.assertTrue(verdict.value)

    def test_ambiguous_reply_is_retried_once(self):
        verdict = verify_llm('x', 'y', self.build_judge('Neither', 'True'))
        self.assertTrue(verdict.value)

    def test_persistent_ambiguity_is_an_error(self):
        verdict = verify_llm('x', 'y', self.build_judge('Unsure', 'Still unsure', 'True'))
        self.assertTrue(verdict.is_error)
        self.assertEqual(verdict.raw, 'Still unsure')

    def test_backend_failure_is_an_error(self):
        judge = ScriptedBackend('judge', [])
        verdict = verify_llm('x', 'y', judge, tag='verifier:p1')
        self.assertTrue(verdict.is_error)
        self.assertIn('verifier:p1', verdict.error)

    def test_judge_verdict_requires_raw(self):
        with self.assertRaises(ValidationError):
            Verdict(True, VerifyMethod.LLM_JUDGE).clean()


class EvaluateVerifierTests(SimpleTestCase):
    def setUp(self):
        result = load_samples(FIXTURES / 'annotated_samples.jsonl')
        self.assertEqual(result.errors, [])
        self.samples = result.records

    def test_fixture_shape(self):
        self.assertEqual(len(self.samples), 40)
        self.assertEqual(sum(sample.human_label for sample in self.samples), 30)

    def test_exact_match_hand_count(self):
        report = evaluate_verifier(self.samples, VerifyMethod.EXACT_MATCH, workers=2)
        # Ten alias answers are the only misses.
        self.assertEqual((report.tp, report.fp, report.tn, report.fn), (20, 0, 10, 10))
        self.assertEqual(report.accuracy, 0.75)

    def test_scripted_judge_hand_count(self):
        judge = ScriptedBackend.from_file('judge', FIXTURES / 'judge_script.jsonl')
        report = evaluate_verifier(self.samples, VerifyMethod.LLM_JUDGE, judge=judge, workers=4)
        self.assertEqual((report.tp, report.fp, report.tn, report.fn), (30, 1, 9, 0))
        self.assertEqual(report.accuracy, 0.975)
        self.assertEqual(report.errors, [])
        self.assertEqual([row['problem_id'] for row in report.verdicts][:3], ['v01', 'v02', 'v03'])

    def test_exact_match_is_strictly_worse_than_judge(self):
        judge = ScriptedBackend.from_file('judge', FIXTURES / 'judge_script.jsonl')
        exact = evaluate_verifier(self.samples, VerifyMethod.EXACT_MATCH)
        llm = evaluate_verifier(self.samples, VerifyMethod.LLM_JUDGE, judge=judge)
        self.assertLess(exact.accuracy, llm.accuracy)

    def test_accuracy_identity(self):
        report = evaluate_verifier(self.samples, VerifyMethod.EXACT_MATCH)
        self.assertEqual(report.accuracy, 1 - (report.fp + report.fn) / report.total)

    def test_always_true_on_positive_labels(self):
        samples = [AnnotatedSample(f'p{i}', 'Aspirin', 'aspirin', True) for i in range(5)]
        report = evaluate_verifier(samples, VerifyMethod.EXACT_MATCH)
        self.assertEqual(report.accuracy, 1.0)
        self.assertEqual(report.fn, 0)

    def test_193_of_200(self):
        samples = [AnnotatedSample(f'p{i}', 'Aspirin', 'aspirin', i >= 7) for i in range(200)]
        report = evaluate_verifier(samples, VerifyMethod.EXACT_MATCH)
        self.assertEqual(report.fp, 7)
        self.assertEqual(report.accuracy, 0.965)

    def test_judge_errors_count_as_wrong(self):
        samples = [
            AnnotatedSample('a', 'x', 'x', True),
            AnnotatedSample('b', 'y', 'z', False),
        ]
        judge = ScriptedBackend('judge', [ScriptEntry(r'verifier:a', ['True'], repeat=True)])
        report = evaluate_verifier(samples, VerifyMethod.LLM_JUDGE, judge=judge)
        self.assertEqual((report.tp, report.fp), (1, 1))
        self.assertEqual([error['problem_id'] for error in report.errors], ['b'])
        self.assertEqual(report.accuracy, 0.5)

    def test_empty_sample_list_rejected(self):
        with self.assertRaises(ValueError):
            evaluate_verifier([], VerifyMethod.EXACT_MATCH)
