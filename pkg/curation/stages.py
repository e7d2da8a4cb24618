import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from django.conf import settings
from django.core.exceptions import ValidationError

from llm_gateway.gateway import complete
from llm_gateway.models import ChatRequest
from llm_gateway.parsing import JsonExtractionError, extract_json
from llm_gateway.prompts import render_prompt
from problem_bank.models import VerifiableProblem
from problem_bank.text import normalize_text

from .models import (
    PROBE_ERROR,
    ChallengeProbeResult,
    CurationReport,
    FilterVerdict,
    Stage,
    StageDrop,
    Suitability,
)


logger = logging.getLogger(__name__)

QUESTION_KEY = 'Open-ended Verifiable Question'
ANSWER_KEY = 'Standard Answer'

# Letters are upper case only; lower-case "a" is too often an article.
_KEYWORD_LETTER_RE = re.compile(
    r'(?i:answer|option|choice)\s*(?i:is)?\s*:?\s*(?i:option\s*)?\(?([A-H])\)?(?![A-Za-z])'
)
# A leading letter needs a delimiter or nothing after it, so "A reasonable pick ..." is not A.
_LEADING_LETTER_RE = re.compile(r'^\s*\(?([A-H])(?:[\).:]|\s*$)')
_PAREN_LETTER_RE = re.compile(r'\(([A-H])\)')
_TRAILING_LETTER_RE = re.compile(r'\b([A-H])[.)]?\s*$')

_VERDICT_RES = [
    (verdict, re.compile(rf'\b{re.escape(verdict)}\b', re.IGNORECASE))
    for verdict in sorted(Suitability.values, key=len, reverse=True)
]


class ReformatError(Exception):
    pass


def parse_probe_letter(reply, labels):
    """Pick the option letter a probe model chose, or None."""
    keyword_hits = [m.group(1) for m in _KEYWORD_LETTER_RE.finditer(reply) if m.group(1) in labels]
    if keyword_hits:
        return keyword_hits[-1]
    for pattern in (_LEADING_LETTER_RE, _PAREN_LETTER_RE, _TRAILING_LETTER_RE):
        for match in pattern.finditer(reply.strip()):
            if match.group(1) in labels:
                return match.group(1)
    return None


def parse_verdict(reply):
    for verdict, pattern in _VERDICT_RES:
        if pattern.search(reply):
            return verdict
    return None


def probe_challenge(mcq, probes):
    conf = settings.PIPELINE
    prompt = render_prompt('probe_mcq', Question=mcq.question, Options=mcq.render_options())
    result = ChallengeProbeResult(mcq.id, mcq.answer_label, question_length=len(mcq.question.strip()))
    for probe in probes:
        request = ChatRequest.from_prompt(
            prompt,
            tag=f'probe:{mcq.id}:{probe.name}',
            temperature=conf['JUDGE_TEMPERATURE'],
            max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
        )
        reply = complete(probe, request)
        if not reply.ok:
            logger.warning('Probe %s failed on %s: %s', probe.name, mcq.id, reply.error)
            result.probe_answers[probe.name] = PROBE_ERROR
        else:
            result.probe_answers[probe.name] = parse_probe_letter(reply.content, mcq.options)
    return result


def judge_suitability(mcq, judge, retries=None):
    conf = settings.PIPELINE
    retries = conf['JUDGE_RETRIES'] if retries is None else retries
    prompt = render_prompt(
        'filter_mcq', Question=mcq.question, Options=mcq.render_options(), Answer=mcq.render_answer(),
    )
    request = ChatRequest.from_prompt(
        prompt,
        tag=f'filter:{mcq.id}',
        temperature=conf['JUDGE_TEMPERATURE'],
        max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
    )
    raw = ''
    for _ in range(retries + 1):
        reply = complete(judge, request)
        raw = reply.content
        if reply.ok:
            verdict = parse_verdict(raw)
            if verdict is not None:
                return FilterVerdict(mcq.id, verdict, raw)
    return FilterVerdict(mcq.id, Suitability.NOT_REFORMULATABLE, raw, reason='unparseable')


def parse_reformat_reply(content):
    try:
        payload = extract_json(content)
    except JsonExtractionError:
        raise ReformatError('no JSON object in reply')
    if not isinstance(payload, dict):
        raise ReformatError('reply JSON is not an object')
    missing = [key for key in (QUESTION_KEY, ANSWER_KEY) if not str(payload.get(key) or '').strip()]
    if missing:
        raise ReformatError(f'missing {", ".join(missing)}')
    return str(payload[QUESTION_KEY]).strip(), str(payload[ANSWER_KEY]).strip()


def reformat_open_ended(mcq, reformatter, retries=None):
    """Rewrite an MCQ into an open-ended VerifiableProblem, or raise ReformatError."""
    conf = settings.PIPELINE
    retries = conf['REFORMAT_RETRIES'] if retries is None else retries
    prompt = render_prompt(
        'reformat_mcq', Question=mcq.question, Options=mcq.render_options(), Answer=mcq.render_answer(),
    )
    request = ChatRequest.from_prompt(
        prompt,
        tag=f'reformat:{mcq.id}',
        temperature=conf['GENERATION_TEMPERATURE'],
        max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
    )

    error = None
    for _ in range(retries + 1):
        reply = complete(reformatter, request)
        if not reply.ok:
            error = ReformatError(reply.error)
            continue
        try:
            question, ground_truth = parse_reformat_reply(reply.content)
        except ReformatError as exc:
            error = exc
            continue

        problem = VerifiableProblem(
            id=mcq.id,
            question=question,
            ground_truth=ground_truth,
            origin_mcq_id=mcq.id,
            tags=(mcq.source,),
        )
        try:
            problem.clean()
        except ValidationError as exc:
            messages = '; '.join(f'{name}: {" ".join(msgs)}' for name, msgs in exc.message_dict.items())
            raise ReformatError(f'invalid problem ({messages})')
        return problem
    raise error


@dataclass
class CurationConfig:
    judge: object
    reformatter: object
    probes: list = field(default_factory=list)
    min_question_chars: int = None
    judge_retries: int = None
    reformat_retries: int = None
    workers: int = None

    def __post_init__(self):
        conf = settings.PIPELINE
        if self.min_question_chars is None:
            self.min_question_chars = conf['MIN_QUESTION_CHARS']
        if self.workers is None:
            self.workers = conf['WORKERS']


def curate_one(mcq, config):
    """Run one MCQ through probe, length, judge and reformat; return (problem, drop)."""
    probe = probe_challenge(mcq, config.probes)
    if probe.all_correct:
        return None, StageDrop(mcq.id, Stage.CHALLENGE_PROBE, f'all {len(probe.probe_answers)} probes correct')

    if probe.question_length < config.min_question_chars:
        return None, StageDrop(
            mcq.id, Stage.LENGTH_FILTER,
            f'question has {probe.question_length} chars, minimum {config.min_question_chars}',
        )

    verdict = judge_suitability(mcq, config.judge, config.judge_retries)
    if verdict.verdict != Suitability.PASS:
        reason = verdict.verdict if not verdict.reason else f'{verdict.verdict} ({verdict.reason})'
        return None, StageDrop(mcq.id, Stage.SUITABILITY_JUDGE, str(reason))

    try:
        problem = reformat_open_ended(mcq, config.reformatter, config.reformat_retries)
    except ReformatError as exc:
        return None, StageDrop(mcq.id, Stage.REFORMAT, str(exc))
    return problem, None


def run_curation(mcqs, config):
    """
    Turn MCQs into verifiable problems.

    Records are processed in parallel and reported in input order. Problems
    whose normalized question repeats an earlier one are dropped.
    """
    def guarded(mcq):
        try:
            return curate_one(mcq, config)
        except Exception as exc:  # noqa: BLE001
            logger.exception('Curation failed for %s', mcq.id)
            return None, StageDrop(mcq.id, Stage.ERROR, f'unexpected error: {exc}')

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        outcomes = list(executor.map(guarded, mcqs))

    report = CurationReport(input_count=len(mcqs))
    problems = []
    seen_questions = {}
    for problem, drop in outcomes:
        if drop is not None:
            report.drops.append(drop)
            continue
        key = normalize_text(problem.question)
        if key in seen_questions:
            report.drops.append(StageDrop(problem.id, Stage.DEDUP, f'same question as {seen_questions[key]}'))
            continue
        seen_questions[key] = problem.id
        problems.append(problem)

    report.output_count = len(problems)
    report.clean()
    logger.info('Curation kept %d of %d records: %s', report.output_count, report.input_count, report.stage_counts())
    return problems, report
