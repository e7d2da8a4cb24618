import json
import logging
from dataclasses import dataclass, field

from .bank import ProblemBankError
from .text import normalize_text


logger = logging.getLogger(__name__)

MIN_WINDOW = 8


@dataclass
class RemovedRecord:
    id: str
    eval_index: int
    evidence: str

    @property
    def reason(self):
        return f'overlaps eval text {self.eval_index}'

    def as_dict(self):
        return {'id': self.id, 'reason': self.reason, 'evidence': self.evidence}


@dataclass
class DecontaminationResult:
    kept: list = field(default_factory=list)
    removed: list = field(default_factory=list)


def comparable_text(problem, include_answer=False):
    text = problem.question
    if include_answer:
        text = f'{text} {problem.ground_truth}'
    return normalize_text(text)


def build_window_index(eval_texts, window):
    """
    Map every window-length substring of the normalized eval texts to the
    lowest eval index containing it. Dict lookups compare the full substring,
    so a hash collision never produces a false match.
    """
    index = {}
    for eval_index, text in enumerate(eval_texts):
        normalized = normalize_text(text)
        for start in range(len(normalized) - window + 1):
            index.setdefault(normalized[start:start + window], eval_index)
    return index


def find_overlap(text, index, window):
    for start in range(len(text) - window + 1):
        chunk = text[start:start + window]
        eval_index = index.get(chunk)
        if eval_index is not None:
            return eval_index, chunk
    return None


def decontaminate(problems, eval_texts, window, include_answer=False):
    """
    Drop every problem sharing a window-length character span with an eval
    text. Evidence is the earliest overlapping span of the problem text.
    """
    if window < MIN_WINDOW:
        raise ValueError(f'window must be at least {MIN_WINDOW} characters, got {window}')

    index = build_window_index(eval_texts, window)
    result = DecontaminationResult()
    for problem in problems:
        hit = find_overlap(comparable_text(problem, include_answer), index, window)
        if hit is None:
            result.kept.append(problem)
        else:
            eval_index, evidence = hit
            result.removed.append(RemovedRecord(problem.id, eval_index, evidence))

    logger.info(
        'Decontamination at window %d: kept %d, removed %d',
        window, len(result.kept), len(result.removed),
    )
    return result


EVAL_TEXT_FIELDS = ('question', 'text')


def read_eval_texts(path):
    """Eval items from JSON lines: an object with "question" or "text", or a bare string."""
    texts = []
    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ProblemBankError(f'Cannot read {path}: {exc}') from exc

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProblemBankError(f'{path}:{line_no}: invalid JSON ({exc.msg})') from exc
        if isinstance(payload, dict):
            payload = next((payload[name] for name in EVAL_TEXT_FIELDS if isinstance(payload.get(name), str)), None)
        if not isinstance(payload, str):
            raise ProblemBankError(f'{path}:{line_no}: no "question" or "text" field')
        texts.append(payload)
    return texts
