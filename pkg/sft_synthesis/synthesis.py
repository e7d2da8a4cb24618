import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from django.conf import settings

from llm_gateway.gateway import complete
from llm_gateway.models import ChatRequest
from llm_gateway.parsing import JsonExtractionError, extract_json
from llm_gateway.prompts import render_prompt
from rl_reward.structure import render_structured
from trajectory_search.models import CotAction
from trajectory_search.strategies import serialize_history

from .models import CotVariant, Provenance, SftRecord, SkipStage, SynthesisSkip, find_schema_marker


logger = logging.getLogger(__name__)


class SynthesisError(Exception):
    def __init__(self, stage, reason):
        super().__init__(f'{stage}: {reason}')
        self.stage = stage
        self.reason = reason


def _generation_request(prompt, tag):
    conf = settings.PIPELINE
    return ChatRequest.from_prompt(
        prompt,
        tag=tag,
        temperature=conf['GENERATION_TEMPERATURE'],
        max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
    )


def render_merge_prompt(problem, trace):
    return render_prompt(
        'merge_cot', Thought_Process=serialize_history(trace.winning_nodes()), Question=problem.question,
    )


def read_natural_reasoning(content):
    """The merged monologue from a merge reply; ValueError when it is missing or still structured."""
    try:
        payload = extract_json(content)
    except JsonExtractionError as exc:
        raise ValueError('reply has no JSON object') from exc
    text = payload.get('NaturalReasoning') if isinstance(payload, dict) else None
    if not isinstance(text, str) or not text.strip():
        raise ValueError('reply has no "NaturalReasoning" text')
    marker = find_schema_marker(text)
    if marker:
        raise ValueError(f'merged text still contains {marker!r}')
    return text.strip()


def merge_cot(problem, trace, generator, *, retries=None):
    """Rewrite the winning attempt into one natural reasoning monologue."""
    if not trace.succeeded:
        raise ValueError(f'Trace {trace.problem_id} did not succeed; nothing to merge')
    retries = settings.PIPELINE['SYNTHESIS_RETRIES'] if retries is None else retries
    request = _generation_request(render_merge_prompt(problem, trace), f'merge:{problem.id}')

    reason = ''
    for _ in range(retries + 1):
        reply = complete(generator, request)
        if not reply.ok:
            raise SynthesisError(SkipStage.MERGE, f'backend failure: {reply.error}')
        try:
            return read_natural_reasoning(reply.content)
        except ValueError as exc:
            reason = str(exc)
            logger.info('merge:%s rejected: %s', problem.id, reason)
    raise SynthesisError(SkipStage.MERGE, reason)


def generate_response(problem, complex_cot, generator, *, retries=None):
    if not complex_cot.strip():
        raise ValueError('generate_response needs a non-empty reasoning text')
    retries = settings.PIPELINE['SYNTHESIS_RETRIES'] if retries is None else retries
    prompt = render_prompt('generate_response', Complex_CoT=complex_cot, Question=problem.question)
    request = _generation_request(prompt, f'response:{problem.id}')

    for _ in range(retries + 1):
        reply = complete(generator, request)
        if not reply.ok:
            raise SynthesisError(SkipStage.RESPONSE, f'backend failure: {reply.error}')
        if reply.content.strip():
            return reply.content.strip()
        logger.info('response:%s empty reply', problem.id)
    raise SynthesisError(SkipStage.RESPONSE, 'empty reply')


def simple_cot(trace):
    """The winning attempt's initial reasoning as plain paragraphs."""
    node = trace.winning_nodes()[0]
    paragraphs = []
    for step in node.steps:
        if step.action == CotAction.INNER_THINKING:
            paragraphs.append(f'{step.title}. {step.content}')
        else:
            paragraphs.append(step.content)
    return '\n\n'.join(paragraphs)


def render_training_text(record, include_cot=True):
    if include_cot and record.complex_cot:
        return render_structured(record.complex_cot, record.response)
    return record.response


@dataclass
class SynthesisConfig:
    generator: object
    verify: object
    cot_variant: str = CotVariant.COMPLEX
    retries: int = None
    workers: int = None


def synthesize_record(problem, trace, config):
    if config.cot_variant == CotVariant.SIMPLE:
        reasoning = simple_cot(trace)
        marker = find_schema_marker(reasoning)
        if marker:
            raise SynthesisError(SkipStage.MERGE, f'initial reasoning contains {marker!r}')
    else:
        reasoning = merge_cot(problem, trace, config.generator, retries=config.retries)
    response = generate_response(problem, reasoning, config.generator, retries=config.retries)

    verdict = config.verify(response, problem.ground_truth, f'verifier:consistency:{problem.id}')
    if verdict.value is not True:
        raise SynthesisError(SkipStage.CONSISTENCY, verdict.error or 'response disagrees with the ground truth')

    record = SftRecord(problem.id, problem.question, reasoning, response, Provenance.SEARCHED)
    record.clean()
    return record


def synthesize(success_set, config):
    """
    Build searched SftRecords for (problem, trace) pairs.

    Returns (records, skips) in input order; a record that fails merging,
    response generation, or the consistency gate becomes a skip entry.
    """
    workers = config.workers or settings.PIPELINE['WORKERS']

    def run(item):
        problem, trace = item
        try:
            return synthesize_record(problem, trace, config), None
        except SynthesisError as exc:
            return None, SynthesisSkip(problem.id, exc.stage, exc.reason)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        outcomes = list(executor.map(run, success_set))

    records = [record for record, _ in outcomes if record is not None]
    skips = [skip for _, skip in outcomes if skip is not None]
    logger.info('Synthesized %d records, skipped %d', len(records), len(skips))
    return records, skips
