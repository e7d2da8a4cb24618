import logging
import re
from concurrent.futures import ThreadPoolExecutor

from django.conf import settings

from llm_gateway.gateway import complete
from llm_gateway.models import ChatRequest
from llm_gateway.prompts import render_prompt
from problem_bank.bank import read_records

from .models import Verdict, VerifierReport, VerifyMethod
from .serializers import AnnotatedSampleSerializer


logger = logging.getLogger(__name__)

_PUNCTUATION_RE = re.compile(r'[^\w\s]|_')
_TRUE_RE = re.compile(r'\btrue\b', re.IGNORECASE)
_FALSE_RE = re.compile(r'\bfalse\b', re.IGNORECASE)


def normalize_answer(text):
    """Lowercase, turn punctuation into spaces, collapse whitespace."""
    return ' '.join(_PUNCTUATION_RE.sub(' ', text.lower()).split())


def verify_exact(model_response, ground_truth):
    truth = normalize_answer(ground_truth)
    value = bool(truth) and truth in normalize_answer(model_response)
    return Verdict(value, VerifyMethod.EXACT_MATCH)


def read_judge_reply(text):
    has_true = bool(_TRUE_RE.search(text))
    has_false = bool(_FALSE_RE.search(text))
    if has_true != has_false:
        return has_true
    return None


def verify_llm(model_response, ground_truth, judge, *, tag='verifier', retries=1):
    """
    Ask the judge whether model_response agrees with ground_truth.

    A reply naming both or neither of True/False is asked once more; a reply
    that stays ambiguous, or a failed call, yields an error verdict.
    """
    conf = settings.PIPELINE
    prompt = render_prompt('verifier', Model_Response=model_response, Ground_true_Answer=ground_truth)
    request = ChatRequest.from_prompt(
        prompt,
        tag=tag,
        temperature=conf['JUDGE_TEMPERATURE'],
        max_output_tokens=conf['MAX_OUTPUT_TOKENS'],
    )

    reply = None
    for _ in range(retries + 1):
        reply = complete(judge, request)
        if not reply.ok:
            return Verdict(None, VerifyMethod.LLM_JUDGE, raw=reply.content, error=reply.error)
        value = read_judge_reply(reply.content)
        if value is not None:
            return Verdict(value, VerifyMethod.LLM_JUDGE, raw=reply.content)
        logger.info('%s: ambiguous judge reply %r', tag, reply.content[:80])
    return Verdict(None, VerifyMethod.LLM_JUDGE, raw=reply.content, error='ambiguous judge reply')


def make_verifier(method, judge=None):
    """Return fn(model_response, ground_truth, tag) -> Verdict for the given method."""
    if method == VerifyMethod.EXACT_MATCH:
        return lambda response, truth, tag='verifier': verify_exact(response, truth)
    if judge is None:
        raise ValueError('The llm_judge method needs a judge backend')
    return lambda response, truth, tag='verifier': verify_llm(response, truth, judge, tag=tag)


def evaluate_verifier(samples, method, judge=None, workers=None):
    """Score a verifier against human labels. Error verdicts count as wrong."""
    if not samples:
        raise ValueError('evaluate_verifier needs at least one sample')
    verify = make_verifier(method, judge)
    workers = workers or settings.PIPELINE['WORKERS']

    def run(sample):
        return verify(sample.model_answer, sample.ground_truth, f'verifier:{sample.problem_id}')

    with ThreadPoolExecutor(max_workers=workers) as executor:
        verdicts = list(executor.map(run, samples))

    report = VerifierReport(method=method, total=len(samples))
    for sample, verdict in zip(samples, verdicts):
        if verdict.is_error:
            report.errors.append({'problem_id': sample.problem_id, 'error': verdict.error})
            # An undecided verdict is the wrong answer whatever the label.
            predicted = not sample.human_label
        else:
            predicted = verdict.value

        if sample.human_label:
            if predicted:
                report.tp += 1
            else:
                report.fn += 1
        elif predicted:
            report.fp += 1
        else:
            report.tn += 1
        report.verdicts.append({
            'problem_id': sample.problem_id,
            'human_label': sample.human_label,
            'verdict': verdict.value,
            'raw': verdict.raw,
            'error': verdict.error,
        })

    logger.info('%s verifier accuracy %.4f over %d samples', method, report.accuracy, report.total)
    return report


def load_samples(path):
    return read_records(path, AnnotatedSampleSerializer)
