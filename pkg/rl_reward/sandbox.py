import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from rest_framework.exceptions import ValidationError as SerializerValidationError

from problem_bank.bank import ProblemBankError, read_records, write_jsonl
from verifier.checks import normalize_answer, verify_exact

from .models import SandboxProblem, ToyPolicy, Transition
from .ppo import ppo_step, total_variation
from .rewards import kl_divergence, rule_reward, total_reward
from .serializers import MetricsRowSerializer, SandboxProblemSerializer
from .structure import parse_structure, render_structured


logger = logging.getLogger(__name__)

CANDIDATE_WORDS = ('alpha', 'beta', 'gamma', 'delta', 'epsilon', 'zeta', 'theta', 'kappa')
ROLLOUT_THINKING = 'Weighing the candidate answers against what the question asks.'


def build_toy_bank(problems=50, candidates=4, all_wrong=False):
    """
    Deterministic toy bank: problem i has truth "agent i alpha" and K
    candidates "agent i <word>", the correct one at position i mod K.
    With all_wrong the truth is "agent i omega", which no candidate matches.
    """
    if not 2 <= candidates <= len(CANDIDATE_WORDS):
        raise ValueError(f'candidates must lie in [2, {len(CANDIDATE_WORDS)}]')
    bank = []
    for i in range(problems):
        words = list(CANDIDATE_WORDS[:candidates])
        shift = i % candidates
        words = words[-shift:] + words[:-shift] if shift else words
        truth = f'agent {i} omega' if all_wrong else f'agent {i} alpha'
        bank.append(SandboxProblem(f'toy-{i:03d}', truth, [f'agent {i} {word}' for word in words]))
    return bank


def mine_candidates(problem, trace, k, rng):
    """
    Candidate set from a successful search: the verified answer plus up to
    k - 1 distinct rejected answers from the trace.
    """
    if not trace.succeeded:
        raise ValueError(f'Trace {trace.problem_id} has no verified answer')
    correct = trace.final_answer()
    if not verify_exact(correct, problem.ground_truth).value:
        correct = problem.ground_truth

    seen = {normalize_answer(correct)}
    wrong = []
    for node in trace.iter_nodes():
        key = normalize_answer(node.answer)
        if node.verdict or key in seen or verify_exact(node.answer, problem.ground_truth).value:
            continue
        seen.add(key)
        wrong.append(node.answer)
    if not wrong:
        raise ValueError(f'Trace {trace.problem_id} has no rejected answer to use as a distractor')

    candidates = [correct] + wrong[:k - 1]
    rng.shuffle(candidates)
    mined = SandboxProblem(problem.id, problem.ground_truth, candidates)
    mined.clean()
    return mined


def load_bank(path):
    result = read_records(path, SandboxProblemSerializer)
    if result.errors:
        raise ProblemBankError(f'{path}: {len(result.errors)} invalid candidate-bank lines')
    sizes = {len(problem.candidates) for problem in result.records}
    if len(sizes) > 1:
        raise ProblemBankError(f'{path}: every problem needs the same number of candidates, got {sorted(sizes)}')
    return result.records


def write_bank(problems, path):
    write_jsonl(path, (dict(SandboxProblemSerializer(problem).data) for problem in problems))


def read_metrics(path):
    rows = []
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if not line.strip():
                continue
            serializer = MetricsRowSerializer(data=json.loads(line))
            try:
                serializer.is_valid(raise_exception=True)
            except SerializerValidationError as exc:
                raise ProblemBankError(f'{path}: bad metrics row {line.strip()[:80]}: {exc.detail}') from exc
            rows.append(dict(serializer.validated_data))
    return rows


@dataclass
class SandboxResult:
    bank: list
    initial_policy: ToyPolicy
    policy: ToyPolicy
    curve: list = field(default_factory=list)

    def total_variation(self):
        return total_variation(self.policy, self.initial_policy)

    def final_rule_reward(self):
        return self.curve[-1]['mean_rule_reward'] if self.curve else 0.0


def run_stage2_sandbox(bank, config, *, verify=None, workers=1):
    """
    Contextual-bandit RL over a candidate bank.

    Every update samples one candidate for each drawn problem, renders it in
    the think-then-answer layout, verifies it, shapes the rule reward with
    the KL to the frozen initial policy, and runs one ppo_step. verify(answer,
    ground_truth) returns a Verdict; undecided verdicts drop the sample.
    """
    config.clean()
    if not bank:
        raise ValueError('the sandbox needs at least one problem')
    k = len(bank[0].candidates)
    if any(len(problem.candidates) != k for problem in bank):
        raise ValueError('every problem needs the same number of candidates')
    verify = verify or verify_exact

    rng = np.random.default_rng(config.seed)
    policy = ToyPolicy.uniform(len(bank), k)
    initial = policy.copy()
    reference = initial.logits.copy()
    ref_probs = initial.probs()
    result = SandboxResult(bank, initial, policy)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        for iteration in range(config.updates):
            if config.batch_size >= len(bank):
                rows = np.arange(len(bank))
            else:
                rows = np.sort(rng.choice(len(bank), size=config.batch_size, replace=False))
            probs = policy.probs()
            log_probs = policy.log_probs()
            draws = rng.random(len(rows))
            actions = np.minimum((probs[rows].cumsum(axis=1) < draws[:, None]).sum(axis=1), k - 1)

            outputs = [
                parse_structure(render_structured(ROLLOUT_THINKING, bank[row].candidates[action]))
                for row, action in zip(rows, actions)
            ]
            verdicts = list(executor.map(
                lambda item: verify(item[0].answer, bank[item[1]].ground_truth), zip(outputs, rows),
            ))

            batch, rule_rewards, kls, totals = [], [], [], []
            for row, action, output, verdict in zip(rows, actions, outputs, verdicts):
                if verdict.is_error:
                    continue
                r_rule = rule_reward(output, verdict.value)
                breakdown = total_reward(r_rule, probs[row], ref_probs[row], config.beta)
                batch.append(Transition(int(row), int(action), float(log_probs[row, action]), breakdown.total))
                rule_rewards.append(r_rule)
                kls.append(breakdown.kl_term)
                totals.append(breakdown.total)

            skipped = len(rows) - len(batch)
            if not batch:
                logger.warning('Update %d: every sample was undecided, policy unchanged', iteration)
                continue
            policy, step = ppo_step(policy, batch, config, reference=reference)
            result.curve.append({
                'iter': iteration,
                'mean_rule_reward': float(np.mean(rule_rewards)),
                'mean_kl': float(np.mean(kls)),
                'clip_fraction': step['clip_fraction'],
                'mean_total': float(np.mean(totals)),
                'skipped': skipped,
            })

    result.policy = policy
    logger.info(
        'Sandbox: %d updates, final mean rule reward %.3f, TV to initial %.4f',
        len(result.curve), result.final_rule_reward(), result.total_variation(),
    )
    return result


def initial_kl(policy, initial):
    """Mean KL(policy || initial) over problems."""
    probs, ref = policy.probs(), initial.probs()
    return float(np.mean([kl_divergence(probs[i], ref[i]) for i in range(len(probs))]))
