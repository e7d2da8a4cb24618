import math
import random
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from problem_bank.bank import ProblemBankError, write_jsonl
from problem_bank.models import VerifiableProblem
from trajectory_search.models import CotAction, CotStep, Outcome, SearchAttempt, SearchTrace, Strategy, TrajectoryNode

from .models import PpoConfig, RewardBreakdown, SandboxProblem, StructuredOutput, ToyPolicy, Transition
from .ppo import PpoError, clipped_surrogate, log_softmax, ppo_step, surrogate_gradient, total_variation
from .rewards import kl_divergence, rule_reward, total_reward
from .sandbox import build_toy_bank, load_bank, mine_candidates, read_metrics, run_stage2_sandbox, write_bank
from .structure import parse_structure, render_structured


WORDS = ('aspirin', 'heparin', 'warfarin', 'hmm', 'wait', 'so', 'the', 'dose', 'is', 'renal', 'clearance')


class StructureTests(SimpleTestCase):
    def test_think_then_answer(self):
        parsed = parse_structure('## Thinking\nhmm…\n## Final Response\nAspirin')
        self.assertEqual(parsed.think, 'hmm…')
        self.assertEqual(parsed.answer, 'Aspirin')
        self.assertTrue(parsed.is_structured)

    def test_null_structured(self):
        cases = [
            'Aspirin',
            '## Final Response\nAspirin\n## Thinking\nhmm',
            '## Thinking\nhmm, no answer section',
            '## Thinking\nhmm\n## Final Response\n   ',
            '## Thinking\n\n## Final Response\nAspirin',
        ]
        for raw in cases:
            with self.subTest(raw=raw):
                parsed = parse_structure(raw)
                self.assertFalse(parsed.is_structured)
                self.assertIsNone(parsed.think)
                parsed.clean()

    def test_render_round_trip(self):
        parsed = parse_structure(render_structured(' Considering renal clearance. ', 'Heparin '))
        self.assertEqual((parsed.think, parsed.answer), ('Considering renal clearance.', 'Heparin'))

    def test_half_structured_is_invalid(self):
        with self.assertRaises(ValidationError):
            StructuredOutput('x', think='t').clean()


class RuleRewardTests(SimpleTestCase):
    def test_reward_table(self):
        structured = parse_structure(render_structured('thinking', 'Aspirin'))
        self.assertEqual(rule_reward(structured, True), 1.0)
        self.assertEqual(rule_reward(structured, False), 0.1)
        self.assertEqual(rule_reward(parse_structure('Aspirin'), None), 0.0)

    def test_verdict_contract(self):
        with self.assertRaises(ValueError):
            rule_reward(parse_structure('Aspirin'), True)
        with self.assertRaises(ValueError):
            rule_reward(parse_structure(render_structured('thinking', 'Aspirin')), None)

    def test_randomized_texts(self):
        rng = random.Random(0)
        for _ in range(100):
            think = ' '.join(rng.choice(WORDS) for _ in range(rng.randint(1, 12)))
            answer = ' '.join(rng.choice(WORDS) for _ in range(rng.randint(1, 4)))
            if rng.random() < 0.5:
                verdict = rng.random() < 0.5
                reward = rule_reward(parse_structure(render_structured(think, answer)), verdict)
                self.assertEqual(reward, 1.0 if verdict else 0.1)
            else:
                self.assertEqual(rule_reward(parse_structure(f'{think}\n{answer}'), None), 0.0)


class KlTests(SimpleTestCase):
    def test_hand_computed_case(self):
        self.assertAlmostEqual(kl_divergence([1.0, 0.0], [0.5, 0.5]), math.log(2), delta=1e-9)
        breakdown = total_reward(1.0, [1.0, 0.0], [0.5, 0.5], 0.03)
        self.assertAlmostEqual(breakdown.total, 0.97921, delta=1e-5)
        self.assertAlmostEqual(breakdown.total, 1 - 0.03 * math.log(2), delta=1e-12)
        breakdown.clean()

    def test_identity_and_zero_beta(self):
        dist = [0.2, 0.3, 0.5]
        self.assertEqual(kl_divergence(dist, dist), 0.0)
        self.assertEqual(total_reward(0.1, dist, dist, 0.5).total, 0.1)
        self.assertEqual(total_reward(1.0, [0.9, 0.05, 0.05], dist, 0.0).total, 1.0)

    def test_random_distributions(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = rng.dirichlet(np.ones(4))
            q = rng.dirichlet(np.ones(4))
            kl = kl_divergence(p, q)
            self.assertGreater(kl, 0.0)
            breakdown = total_reward(0.1, p, q, 0.03)
            self.assertLessEqual(breakdown.total, 0.1)
            self.assertAlmostEqual(kl_divergence(p, p), 0.0, delta=1e-12)

    def test_zero_reference_mass_is_floored(self):
        kl = kl_divergence([0.5, 0.5], [1.0, 0.0])
        self.assertTrue(math.isfinite(kl))
        self.assertGreater(kl, 10)

    def test_argument_errors(self):
        with self.assertRaises(ValueError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])
        with self.assertRaises(ValueError):
            kl_divergence([0.5, 0.6], [0.5, 0.5])
        with self.assertRaises(ValueError):
            total_reward(1.0, [0.5, 0.5], [0.5, 0.5], -1)

    def test_breakdown_invariants(self):
        with self.assertRaises(ValidationError):
            RewardBreakdown(r_rule=0.5, kl_term=0.0, beta=0.0, total=0.5).clean()
        with self.assertRaises(ValidationError):
            RewardBreakdown(r_rule=1.0, kl_term=0.1, beta=0.1, total=1.0).clean()


class SurrogateGradientTests(SimpleTestCase):
    def setUp(self):
        self.logits = np.array([0.3, -0.2, 0.5])
        self.actions = np.array([0, 2, 1, 0, 2])
        # Ratios come out near 0.90, 1.05, 0.98, 1.35 and 1.49.
        offsets = np.array([0.1, -0.05, 0.02, -0.3, -0.4])
        self.old_logprobs = log_softmax(self.logits)[self.actions] + offsets
        self.advantages = np.array([1.0, -0.5, 0.7, -1.2, 0.8])

    def test_matches_finite_differences(self):
        analytic = surrogate_gradient(self.logits, self.actions, self.old_logprobs, self.advantages, 0.2)
        h = 1e-6
        numeric = np.zeros(3)
        for i in range(3):
            up, down = self.logits.copy(), self.logits.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = (
                clipped_surrogate(up, self.actions, self.old_logprobs, self.advantages, 0.2)
                - clipped_surrogate(down, self.actions, self.old_logprobs, self.advantages, 0.2)
            ) / (2 * h)
        self.assertLess(np.max(np.abs(analytic - numeric)), 1e-5)

    def test_clipped_branch_has_zero_gradient(self):
        logits = np.zeros(3)
        old = np.array([math.log(1 / 3) - math.log(1.5)])
        grad = surrogate_gradient(logits, np.array([0]), old, np.array([1.0]), 0.2)
        self.assertTrue(np.array_equal(grad, np.zeros(3)))
        self.assertAlmostEqual(clipped_surrogate(logits, np.array([0]), old, np.array([1.0]), 0.2), 1.2)

    def test_negative_advantage_below_clip(self):
        logits = np.zeros(3)
        old = np.array([math.log(1 / 3) - math.log(0.5)])
        grad = surrogate_gradient(logits, np.array([1]), old, np.array([-1.0]), 0.2)
        self.assertTrue(np.array_equal(grad, np.zeros(3)))

    def test_unbounded_clip_is_plain_policy_gradient(self):
        huge = 1e9
        ratio = np.exp(log_softmax(self.logits)[self.actions] - self.old_logprobs)
        probs = np.exp(log_softmax(self.logits))
        expected = np.zeros(3)
        for action, r, a in zip(self.actions, ratio, self.advantages):
            expected += a * r * (np.eye(3)[action] - probs)
        expected /= len(self.actions)

        self.assertAlmostEqual(
            clipped_surrogate(self.logits, self.actions, self.old_logprobs, self.advantages, huge),
            float(np.mean(ratio * self.advantages)),
            delta=1e-12,
        )
        grad = surrogate_gradient(self.logits, self.actions, self.old_logprobs, self.advantages, huge)
        self.assertTrue(np.allclose(grad, expected, rtol=0, atol=1e-12))


class PpoStepTests(SimpleTestCase):
    def test_better_candidate_gains_probability(self):
        policy = ToyPolicy.uniform(1, 2)
        batch = [Transition(0, 0, math.log(0.5), 1.0), Transition(0, 1, math.log(0.5), 0.1)]
        updated, metrics = ppo_step(policy, batch, PpoConfig(beta=0.0, ppo_epochs=1))
        self.assertGreater(updated.probs()[0, 0], 0.5)
        self.assertAlmostEqual(metrics['mean_reward'], 0.55)
        updated.clean()
        self.assertTrue(np.array_equal(policy.logits, np.zeros((1, 2))))

    def test_value_moves_toward_reward(self):
        policy = ToyPolicy.uniform(2, 3)
        updated, _ = ppo_step(policy, [Transition(1, 2, math.log(1 / 3), 1.0)], PpoConfig())
        self.assertGreater(updated.values[1], 0.0)
        self.assertLess(updated.values[1], 1.0)
        self.assertEqual(updated.values[0], 0.0)

    def test_fully_clipped_batch(self):
        policy = ToyPolicy.uniform(1, 2)
        batch = [Transition(0, 0, math.log(0.5) - math.log(1.5), 1.0)]
        updated, metrics = ppo_step(policy, batch, PpoConfig(), reference=policy.logits.copy())
        self.assertEqual(metrics['clip_fraction'], 1.0)
        self.assertTrue(np.array_equal(updated.logits, policy.logits))
        self.assertEqual(metrics['kl'], 0.0)

    def test_proximal_pull_toward_reference(self):
        policy = ToyPolicy(np.array([[2.0, 0.0]]), np.zeros(1))
        batch = [Transition(0, 1, float(policy.log_probs()[0, 1]), 0.0)]
        free, _ = ppo_step(policy, batch, PpoConfig(beta=0.0, ppo_epochs=1))
        pulled, _ = ppo_step(policy, batch, PpoConfig(beta=10.0, ppo_epochs=1), reference=np.zeros((1, 2)))
        self.assertLess(total_variation(pulled, ToyPolicy.uniform(1, 2)), total_variation(free, ToyPolicy.uniform(1, 2)))

    def test_errors(self):
        with self.assertRaises(PpoError):
            ppo_step(ToyPolicy.uniform(1, 2), [], PpoConfig())
        with self.assertRaises(PpoError):
            ppo_step(ToyPolicy.uniform(1, 2), [Transition(0, 0, math.log(0.5), float('inf'))], PpoConfig())

    def test_config_validation(self):
        for changes in ({'clip_range': 1.0}, {'discount': 0.0}, {'ppo_epochs': 0}, {'learning_rate': 0}):
            with self.subTest(changes=changes), self.assertRaises(ValidationError):
                PpoConfig().replace(**changes).clean()
        preset = PpoConfig.reference()
        self.assertEqual(
            (preset.clip_range, preset.beta, preset.ppo_epochs, preset.discount, preset.value_coef, preset.batch_size),
            (0.2, 0.03, 3, 1.0, 1.0, 128),
        )
        preset.clean()


class SandboxTests(SimpleTestCase):
    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)

    def test_toy_bank(self):
        bank = build_toy_bank(50, 4)
        self.assertEqual(len(bank), 50)
        for problem in bank:
            problem.clean()
        self.assertEqual(bank[5].candidates.index('agent 5 alpha'), 1)

    def test_learns_verified_answers(self):
        result = run_stage2_sandbox(build_toy_bank(50, 4), PpoConfig.reference(seed=0))
        rewards = [row['mean_rule_reward'] for row in result.curve]
        self.assertEqual(len(rewards), 200)
        self.assertGreaterEqual(np.mean(rewards[-20:]), 0.9)
        self.assertGreater(np.mean(rewards[-20:]), np.mean(rewards[:20]))
        self.assertGreaterEqual(result.final_rule_reward(), 0.9)

    def test_huge_beta_stays_near_initial_policy(self):
        result = run_stage2_sandbox(build_toy_bank(50, 4), PpoConfig.reference(beta=1e3, seed=0))
        self.assertLess(result.total_variation(), 0.05)

    def test_no_verifiable_candidate_caps_reward(self):
        result = run_stage2_sandbox(build_toy_bank(50, 4, all_wrong=True), PpoConfig(updates=50, seed=2))
        for row in result.curve:
            self.assertLessEqual(row['mean_rule_reward'], 0.1 + 1e-12)
        self.assertAlmostEqual(result.final_rule_reward(), 0.1)

    def test_seeded_runs_are_bit_identical(self):
        config = PpoConfig(updates=30, batch_size=20, seed=9)
        first = run_stage2_sandbox(build_toy_bank(30, 4), config)
        second = run_stage2_sandbox(build_toy_bank(30, 4), config)
        self.assertEqual(first.curve, second.curve)
        self.assertTrue(np.array_equal(first.policy.logits, second.policy.logits))

    def test_metrics_file(self):
        result = run_stage2_sandbox(build_toy_bank(10, 3), PpoConfig(updates=5, seed=1))
        path = self.make_tempdir() / 'metrics.jsonl'
        write_jsonl(path, result.curve)
        rows = read_metrics(path)
        self.assertEqual([row['iter'] for row in rows], [0, 1, 2, 3, 4])
        self.assertEqual(set(rows[0]), {'iter', 'mean_rule_reward', 'mean_kl', 'clip_fraction', 'mean_total', 'skipped'})

    def test_bank_file_round_trip(self):
        path = self.make_tempdir() / 'bank.jsonl'
        bank = build_toy_bank(5, 3)
        write_bank(bank, path)
        self.assertEqual(load_bank(path), bank)

        write_jsonl(path, [{'problem_id': 'x', 'ground_truth': 'a', 'candidates': ['b', 'c']}])
        with self.assertRaises(ProblemBankError):
            load_bank(path)


class MineCandidatesTests(SimpleTestCase):
    def node(self, iteration, answer, verdict):
        steps = [CotStep(CotAction.INNER_THINKING, 'Thinking.', 'Step'), CotStep(CotAction.FINAL_CONCLUSION, answer)]
        strategy = Strategy.INIT if iteration == 0 else Strategy.CORRECTION
        return TrajectoryNode(iteration, strategy, steps, answer, verdict=verdict)

    def setUp(self):
        self.problem = VerifiableProblem(id='p1', question='Which enzyme?', ground_truth='Hexokinase')
        nodes = [self.node(0, 'Glucokinase', False), self.node(1, 'glucokinase.', False),
                 self.node(2, 'Pyruvate kinase', False), self.node(3, 'Hexokinase', True)]
        self.trace = SearchTrace('p1', 0, 3, 3, [SearchAttempt(nodes)], outcome=Outcome.SUCCESS, success=(0, 3))

    def test_mined_set(self):
        mined = mine_candidates(self.problem, self.trace, 4, random.Random(0))
        self.assertEqual(sorted(mined.candidates), ['Glucokinase', 'Hexokinase', 'Pyruvate kinase'])
        mined = mine_candidates(self.problem, self.trace, 2, random.Random(0))
        self.assertEqual(sorted(mined.candidates), ['Glucokinase', 'Hexokinase'])

    def test_needs_success_and_distractor(self):
        discarded = SearchTrace('p1', 0, 3, 3, [SearchAttempt([self.node(0, 'Glucokinase', False)])])
        with self.assertRaises(ValueError):
            mine_candidates(self.problem, discarded, 4, random.Random(0))
        lucky = SearchTrace('p1', 0, 3, 3, [SearchAttempt([self.node(0, 'Hexokinase', True)])],
                            outcome=Outcome.SUCCESS, success=(0, 0))
        with self.assertRaises(ValueError):
            mine_candidates(self.problem, lucky, 4, random.Random(0))

    def test_sandbox_problem_invariant(self):
        with self.assertRaises(ValidationError):
            SandboxProblem('x', 'Hexokinase', ['Hexokinase']).clean()
        with self.assertRaises(ValidationError):
            SandboxProblem('x', 'Hexokinase', ['Hexokinase', 'hexokinase!']).clean()
