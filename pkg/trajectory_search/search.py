import hashlib
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from django.conf import settings

from llm_gateway.gateway import complete
from llm_gateway.models import ChatRequest

from .models import Outcome, SearchAttempt, SearchTrace, Strategy, TrajectoryNode
from .strategies import CotFormatError, parse_cot_reply, render_search_prompt, sample_backtrack_target, sample_strategy


logger = logging.getLogger(__name__)


class AttemptAborted(Exception):
    """The generator failed for good; the current attempt ends and counts toward T."""


def problem_seed(seed, problem_id):
    digest = hashlib.sha256(f'{seed}:{problem_id}'.encode('utf-8')).hexdigest()
    return int(digest[:16], 16)


def generate_node(problem, prompt, generator, *, iteration, strategy, tag, format_retries=None):
    conf = settings.PIPELINE
    format_retries = conf['FORMAT_RETRIES'] if format_retries is None else format_retries
    request = ChatRequest.from_prompt(
        prompt,
        tag=tag,
        temperature=conf['GENERATION_TEMPERATURE'],
        max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
    )
    last_error = None
    for _ in range(format_retries + 1):
        reply = complete(generator, request)
        if not reply.ok:
            raise AttemptAborted(f'backend failure: {reply.error}')
        try:
            steps, answer = parse_cot_reply(reply.content)
        except CotFormatError as exc:
            last_error = exc
            logger.info('%s: malformed CoT (%s), re-prompting', tag, exc)
            continue
        return TrajectoryNode(iteration=iteration, strategy=strategy, steps=steps, answer=answer)
    raise AttemptAborted(f'malformed CoT after {format_retries + 1} tries: {last_error}')


def init_cot(problem, generator, *, attempt=0, format_retries=None):
    """e_0, y_0 for one attempt."""
    return generate_node(
        problem,
        render_search_prompt(problem, Strategy.INIT),
        generator,
        iteration=0,
        strategy=Strategy.INIT,
        tag=f'search:{problem.id}:{attempt}:0:{Strategy.INIT}',
        format_retries=format_retries,
    )


def refine(problem, history, strategy, generator, rng, *, attempt=0, format_retries=None):
    """Extend a failed history with one strategy; backtracking sees only nodes up to its target."""
    if not history:
        raise ValueError('refine needs at least the initial node')
    iteration = len(history)
    target_j = None
    context = history
    if strategy == Strategy.BACKTRACKING:
        target_j = sample_backtrack_target(iteration, rng)
        context = history[:target_j + 1]

    node = generate_node(
        problem,
        render_search_prompt(problem, strategy, context),
        generator,
        iteration=iteration,
        strategy=strategy,
        tag=f'search:{problem.id}:{attempt}:{iteration}:{strategy}',
        format_retries=format_retries,
    )
    node.target_j = target_j
    return node


def search(problem, generator, verify, *, max_depth, max_attempts, seed, format_retries=None):
    """
    Stage-one search for one problem.

    Each attempt starts from a fresh initial CoT and refines it at most
    max_depth times; every node's answer is verified and the first accepted
    answer ends the search. After max_attempts failed attempts the problem
    is discarded. verify(response, ground_truth, tag) returns a Verdict; an
    undecided verdict counts as rejection.
    """
    if max_depth < 1 or max_attempts < 1:
        raise ValueError('max_depth and max_attempts must both be >= 1')
    rng = random.Random(seed)
    trace = SearchTrace(problem.id, seed, max_depth, max_attempts)

    for attempt_idx in range(max_attempts):
        attempt = SearchAttempt()
        trace.attempts.append(attempt)
        try:
            for iteration in range(max_depth + 1):
                if iteration == 0:
                    node = init_cot(problem, generator, attempt=attempt_idx, format_retries=format_retries)
                else:
                    strategy = sample_strategy(iteration, rng)
                    node = refine(
                        problem, attempt.nodes, strategy, generator, rng,
                        attempt=attempt_idx, format_retries=format_retries,
                    )
                verdict = verify(node.answer, problem.ground_truth, f'verifier:{problem.id}:{attempt_idx}:{iteration}')
                node.verdict = verdict.value is True
                node.verifier_error = verdict.error
                attempt.nodes.append(node)
                if node.verdict:
                    trace.outcome = Outcome.SUCCESS
                    trace.success = (attempt_idx, iteration)
                    return trace
        except AttemptAborted as exc:
            attempt.abort_reason = str(exc)
            logger.info('%s attempt %d aborted: %s', problem.id, attempt_idx, exc)

    trace.outcome = Outcome.DISCARDED
    return trace


@dataclass
class Stage1Result:
    traces: list = field(default_factory=list)
    success_set: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    resumed: int = 0

    def strategy_histogram(self):
        counts = Counter(str(node.strategy) for trace in self.traces for node in trace.iter_nodes())
        return {strategy: counts.get(strategy, 0) for strategy in Strategy.values}

    def summary(self):
        total = len(self.traces) + len(self.failures)
        succeeded = len(self.success_set)
        return {
            'problems': total,
            'succeeded': succeeded,
            'discarded': len(self.traces) - succeeded,
            'failed': len(self.failures),
            'resumed': self.resumed,
            'success_rate': succeeded / total if total else 0.0,
            'strategy_histogram': self.strategy_histogram(),
        }


def run_stage1(problems, generator, verify, store, *, max_depth=None, max_attempts=None, seed=0,
               workers=None, format_retries=None):
    """Search every problem not already in the store; one problem's failure never stops the batch."""
    conf = settings.PIPELINE
    max_depth = max_depth or conf['MAX_DEPTH']
    max_attempts = max_attempts or conf['MAX_ATTEMPTS']
    workers = workers or conf['WORKERS']

    def run_one(problem):
        existing = store.load(problem.id)
        if existing is not None:
            return existing, True, None
        try:
            trace = search(
                problem, generator, verify,
                max_depth=max_depth, max_attempts=max_attempts,
                seed=problem_seed(seed, problem.id), format_retries=format_retries,
            )
            trace.clean()
            store.save(trace)
        except Exception as exc:  # noqa: BLE001
            logger.exception('Search failed for %s', problem.id)
            return None, False, f'{type(exc).__name__}: {exc}'
        return trace, False, None

    with ThreadPoolExecutor(max_workers=workers) as executor:
        outcomes = list(executor.map(run_one, problems))

    result = Stage1Result()
    for problem, (trace, resumed, error) in zip(problems, outcomes):
        if trace is None:
            result.failures.append({'problem_id': problem.id, 'error': error})
            continue
        result.resumed += resumed
        result.traces.append(trace)
        if trace.succeeded:
            result.success_set.append((problem, trace))

    logger.info('Stage one: %s', {k: v for k, v in result.summary().items() if k != 'strategy_histogram'})
    return result
