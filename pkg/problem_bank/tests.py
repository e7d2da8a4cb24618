import json
import random
import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from .bank import (
    ProblemBankError,
    RecordFormat,
    dump_records,
    ingest,
    split_from_dict,
    split_problems,
    split_to_dict,
)
from .decontamination import decontaminate, read_eval_texts
from .models import McqRecord, VerifiableProblem, count_option_lines
from .text import normalize_text


def naive_decontaminate(problems, eval_texts, window):
    """Brute-force all-pairs scan used as the oracle."""
    normalized_evals = [normalize_text(text) for text in eval_texts]
    kept, removed = [], []
    for problem in problems:
        text = normalize_text(problem.question)
        hit = None
        for start in range(len(text) - window + 1):
            chunk = text[start:start + window]
            for eval_index, eval_text in enumerate(normalized_evals):
                if chunk in eval_text:
                    hit = (problem.id, eval_index, chunk)
                    break
            if hit:
                break
        if hit:
            removed.append(hit)
        else:
            kept.append(problem.id)
    return kept, removed


class TempDirMixin:
    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)

    def write_lines(self, path, rows):
        path.write_text(
            ''.join((row if isinstance(row, str) else json.dumps(row)) + '\n' for row in rows),
            encoding='utf-8',
        )
        return path


class McqRecordTests(SimpleTestCase):
    def create_mcq(self, **overrides):
        data = {
            'id': 'mcq-1',
            'question': 'Which enzyme phosphorylates glucose in most tissues?',
            'options': {'A': 'Glucokinase', 'B': 'Hexokinase', 'C': 'Pyruvate kinase'},
            'answer_label': 'B',
        }
        data.update(overrides)
        return McqRecord(**data)

    def test_valid_record_passes_clean(self):
        mcq = self.create_mcq()
        mcq.clean()
        self.assertEqual(mcq.answer_text(), 'Hexokinase')
        self.assertEqual(mcq.render_answer(), 'B. Hexokinase')
        self.assertEqual(mcq.render_options().splitlines()[0], 'A. Glucokinase')

    def test_answer_label_must_be_an_option(self):
        with self.assertRaises(ValidationError) as ctx:
            self.create_mcq(answer_label='F').clean()
        self.assertIn('answer_label', ctx.exception.message_dict)

    def test_option_count_bounds(self):
        with self.assertRaises(ValidationError):
            self.create_mcq(options={'A': 'only'}, answer_label='A').clean()
        many = {label: label.lower() for label in 'ABCDEFGH'}
        self.create_mcq(options=many, answer_label='H').clean()

    def test_blank_question_rejected(self):
        with self.assertRaises(ValidationError) as ctx:
            self.create_mcq(question='   ').clean()
        self.assertIn('question', ctx.exception.message_dict)


class VerifiableProblemTests(SimpleTestCase):
    def test_tags_are_sorted_and_unique(self):
        problem = VerifiableProblem('p1', 'What is it?', 'hexokinase', tags=['b', 'a', 'b'])
        self.assertEqual(problem.tags, ('a', 'b'))

    def test_ground_truth_with_option_label_rejected(self):
        with self.assertRaises(ValidationError) as ctx:
            VerifiableProblem('p1', 'What is it?', 'B) hexokinase').clean()
        self.assertIn('ground_truth', ctx.exception.message_dict)

    def test_question_with_option_list_rejected(self):
        question = 'Which enzyme?\nA) glucokinase\nB) hexokinase'
        self.assertEqual(count_option_lines(question), 2)
        with self.assertRaises(ValidationError) as ctx:
            VerifiableProblem('p1', question, 'hexokinase').clean()
        self.assertIn('question', ctx.exception.message_dict)

    def test_single_option_like_line_is_allowed(self):
        VerifiableProblem('p1', 'Consider vitamin A. Which organ stores it?', 'liver').clean()


class IngestTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        self.tmp = self.make_tempdir()

    def mcq_row(self, record_id, answer_label='A'):
        return {
            'id': record_id,
            'question': f'Question {record_id}?',
            'options': {'A': 'alpha', 'B': 'beta'},
            'answer_label': answer_label,
            'source': 'medqa',
            'language': 'en',
        }

    def test_three_valid_records(self):
        path = self.write_lines(self.tmp / 'mcq.jsonl', [self.mcq_row(f'q{i}') for i in range(3)])
        result = ingest(path, RecordFormat.MCQ_JSON)
        self.assertEqual([record.id for record in result.records], ['q0', 'q1', 'q2'])
        self.assertEqual(result.errors, [])

    def test_invalid_answer_label_is_reported_with_line(self):
        path = self.write_lines(
            self.tmp / 'mcq.jsonl',
            [self.mcq_row('q0'), self.mcq_row('q1', answer_label='F')],
        )
        result = ingest(path, 'mcq_json')
        self.assertEqual(len(result.records), 1)
        self.assertEqual(len(result.errors), 1)
        error = result.errors[0]
        self.assertEqual(error.line, 2)
        self.assertEqual(error.record_id, 'q1')
        self.assertIn('answer_label', error.reason)

    def test_duplicate_id_keeps_first(self):
        first = self.mcq_row('dup')
        second = dict(self.mcq_row('dup'), question='A different question?')
        path = self.write_lines(self.tmp / 'mcq.jsonl', [first, second])
        result = ingest(path, RecordFormat.MCQ_JSON)
        self.assertEqual(len(result.records), 1)
        self.assertEqual(result.records[0].question, 'Question dup?')
        self.assertEqual(result.errors[0].reason, 'duplicate id')

    def test_malformed_json_line_collected(self):
        path = self.write_lines(self.tmp / 'mcq.jsonl', [self.mcq_row('q0'), '{not json', ''])
        result = ingest(path, RecordFormat.MCQ_JSON)
        self.assertEqual(len(result.records), 1)
        self.assertEqual(result.errors[0].line, 2)
        self.assertTrue(result.errors[0].reason.startswith('invalid JSON'))

    def test_missing_file_is_fatal(self):
        with self.assertRaises(ProblemBankError):
            ingest(self.tmp / 'absent.jsonl', RecordFormat.MCQ_JSON)

    def test_verifiable_round_trip(self):
        problems = [
            VerifiableProblem('p1', 'Which enzyme traps glucose in cells?', 'hexokinase', 'm1', ('medqa',)),
            VerifiableProblem('p2', 'Name the drug: ацетилсаліцилова кислота?', 'aspirin'),
        ]
        path = self.tmp / 'problems.jsonl'
        dump_records(problems, path)
        self.assertIn('ацетилсаліцилова', path.read_text(encoding='utf-8'))
        result = ingest(path, RecordFormat.VERIFIABLE_JSON)
        self.assertEqual(result.errors, [])
        self.assertEqual(result.records, problems)
        row = json.loads(path.read_text(encoding='utf-8').splitlines()[0])
        self.assertEqual(set(row), {'id', 'question', 'ground_truth', 'origin_mcq_id', 'tags'})


class SplitTests(SimpleTestCase):
    def build_problems(self, count):
        return [VerifiableProblem(f'p{i}', f'question {i}', f'answer {i}') for i in range(count)]

    def test_full_scale_split(self):
        split = split_problems(self.build_problems(40000), 0.5, seed=7)
        self.assertEqual(len(split.search_set), 20000)
        self.assertEqual(len(split.rl_set), 20000)

    def test_single_problem_rounds_half_up(self):
        split = split_problems(self.build_problems(1), 0.5, seed=0)
        self.assertEqual((len(split.search_set), len(split.rl_set)), (1, 0))

    def test_split_is_deterministic_and_partitions(self):
        problems = self.build_problems(101)
        first = split_problems(problems, 0.3, seed=11)
        second = split_problems(problems, 0.3, seed=11)
        self.assertEqual(first, second)
        self.assertEqual(len(first.search_set), 30)
        self.assertFalse(set(first.search_set) & set(first.rl_set))
        self.assertEqual(set(first.search_set) | set(first.rl_set), {p.id for p in problems})
        self.assertEqual(split_from_dict(split_to_dict(first)), first)

    def test_fraction_outside_open_interval(self):
        for fraction in (0, 1, -0.1, 1.5):
            with self.assertRaises(ValueError):
                split_problems(self.build_problems(4), fraction, seed=0)

    def test_empty_input_rejected(self):
        with self.assertRaises(ValueError):
            split_problems([], 0.5, seed=0)


class DecontaminationTests(SimpleTestCase):
    def random_text(self, rng, words, length):
        return ' '.join(rng.choice(words) for _ in range(length))

    def test_planted_window_is_removed_with_evidence(self):
        eval_text = (
            'A 45-year-old man presents with tearing chest pain radiating to the back and '
            'unequal blood pressures in both arms.'
        )
        span = normalize_text(eval_text)[10:74]
        problem = VerifiableProblem('p1', f'Consider this: {span.upper()} What next?', 'aortic dissection')
        result = decontaminate([problem], ['unrelated text', eval_text], window=64)
        self.assertEqual(result.kept, [])
        removed = result.removed[0]
        self.assertEqual(removed.eval_index, 1)
        self.assertEqual(len(removed.evidence), 64)
        self.assertIn(removed.evidence, normalize_text(eval_text))
        self.assertEqual(removed.as_dict()['reason'], 'overlaps eval text 1')

    def test_window_longer_than_texts_keeps_everything(self):
        problem = VerifiableProblem('p1', 'short identical text', 'x')
        result = decontaminate([problem], ['short identical text'], window=64)
        self.assertEqual(result.kept, [problem])

    def test_normalization_keeps_edge_whitespace(self):
        self.assertEqual(normalize_text('\n  Acute\tMI  '), ' acute mi ')

    def test_leading_whitespace_counts_toward_the_window(self):
        problem = VerifiableProblem('p1', 'Most likely aortic dissection?', 'aortic dissection')
        result = decontaminate([problem], ['\nAortic   dissection'], window=18)
        self.assertEqual(result.kept, [])
        self.assertEqual(result.removed[0].evidence, ' aortic dissection')

    def test_window_below_minimum(self):
        with self.assertRaises(ValueError):
            decontaminate([], [], window=7)

    def test_short_corpus_matches_naive_oracle(self):
        rng = random.Random(3)
        words = ['fever', 'cough', 'rash', 'pain', 'renal', 'liver', 'acute', 'chronic']
        problems = [
            VerifiableProblem(f'p{i}', self.random_text(rng, words, 6), 'x') for i in range(20)
        ]
        evals = [self.random_text(rng, words, 6) for _ in range(5)]
        result = decontaminate(problems, evals, window=12)
        kept, removed = naive_decontaminate(problems, evals, 12)
        self.assertEqual([p.id for p in result.kept], kept)
        self.assertEqual([(r.id, r.eval_index, r.evidence) for r in result.removed], removed)

    def test_randomized_planted_pairs_match_naive_oracle(self):
        rng = random.Random(2024)
        words = ['anemia', 'iron', 'ferritin', 'low', 'high', 'serum', 'marrow', 'smear', 'b12', 'folate']
        evals = [self.random_text(rng, words, 40) for _ in range(20)]
        problems = []
        for i in range(25):
            text = self.random_text(rng, words, 30)
            roll = rng.random()
            source = normalize_text(rng.choice(evals))
            start = rng.randrange(0, len(source) - 70)
            if roll < 0.4:
                text = f'{text} {source[start:start + 70]} {self.random_text(rng, words, 5)}'
            elif roll < 0.6:
                text = f'{source[start:start + 63]} | {text}'
            problems.append(VerifiableProblem(f'p{i}', text, 'x'))

        result = decontaminate(problems, evals, window=64)
        kept, removed = naive_decontaminate(problems, evals, 64)
        self.assertEqual([p.id for p in result.kept], kept)
        self.assertEqual([(r.id, r.eval_index, r.evidence) for r in result.removed], removed)
        self.assertTrue(removed)

        again = decontaminate(result.kept, evals, window=64)
        self.assertEqual(again.removed, [])

    def test_include_answer_compares_question_plus_ground_truth(self):
        eval_text = 'the definitive treatment is emergency surgical repair of the ascending aorta'
        problem = VerifiableProblem(
            'p1',
            'A patient has a Stanford type A dissection. What is',
            'the definitive treatment is emergency surgical repair',
        )
        self.assertEqual(decontaminate([problem], [eval_text], window=40).removed, [])
        removed = decontaminate([problem], [eval_text], window=40, include_answer=True).removed
        self.assertEqual([r.id for r in removed], ['p1'])


class EvalTextTests(TempDirMixin, SimpleTestCase):
    def test_question_text_and_bare_string_lines(self):
        path = self.write_lines(self.make_tempdir() / 'eval.jsonl', [
            {'question': 'First eval question?', 'answer': 'x'},
            {'text': 'Second eval passage.'},
            json.dumps('Third bare string.'),
            '',
        ])
        self.assertEqual(
            read_eval_texts(path),
            ['First eval question?', 'Second eval passage.', 'Third bare string.'],
        )

    def test_line_without_text_is_fatal(self):
        path = self.write_lines(self.make_tempdir() / 'eval.jsonl', [{'question': 'Fine?'}, {'id': 3}])
        with self.assertRaisesMessage(ProblemBankError, ':2:'):
            read_eval_texts(path)
