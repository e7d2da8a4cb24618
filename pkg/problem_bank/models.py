import re
from dataclasses import dataclass, field

from django.core.exceptions import ValidationError


OPTION_LABELS = 'ABCDEFGH'
MIN_OPTIONS = 2
MAX_OPTIONS = 8
SYNTHETIC_SOURCE = 'synthetic'

# "A)", "(B", "(C)" inside a short answer betray a leftover option label.
_INLINE_LABEL_RE = re.compile(rf'(?:\b[{OPTION_LABELS}]\)|\([{OPTION_LABELS}]\b)')
# One enumerated option per line: "A) ...", "(B) ...", "C. ...", "D: ...".
_OPTION_LINE_RE = re.compile(rf'^\s*\(?[{OPTION_LABELS}][\).:]\s+\S')


def count_option_lines(text):
    return sum(1 for line in text.splitlines() if _OPTION_LINE_RE.match(line))


@dataclass
class McqRecord:
    """Closed-set exam question with labelled options."""
    id: str
    question: str
    options: dict
    answer_label: str
    source: str = SYNTHETIC_SOURCE
    language: str = 'en'

    def __str__(self):
        return f"MCQ {self.id} ({self.source})"

    def clean(self):
        errors = {}
        if not self.id.strip():
            errors['id'] = 'id must not be empty.'
        if not self.question.strip():
            errors['question'] = 'question must not be empty.'
        if not MIN_OPTIONS <= len(self.options) <= MAX_OPTIONS:
            errors['options'] = f'expected {MIN_OPTIONS}..{MAX_OPTIONS} options, got {len(self.options)}.'
        else:
            bad_labels = [label for label in self.options if label not in OPTION_LABELS or len(label) != 1]
            if bad_labels:
                errors['options'] = f'invalid option labels: {", ".join(bad_labels)}.'
        if self.answer_label not in self.options:
            errors['answer_label'] = f'answer_label "{self.answer_label}" is not one of the option labels.'
        if errors:
            raise ValidationError(errors)

    def answer_text(self):
        return self.options[self.answer_label]

    def render_options(self):
        return '\n'.join(f'{label}. {text}' for label, text in self.options.items())

    def render_answer(self):
        return f'{self.answer_label}. {self.answer_text()}'


@dataclass
class VerifiableProblem:
    """Open-ended question with one objective ground-truth answer."""
    id: str
    question: str
    ground_truth: str
    origin_mcq_id: str = None
    tags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.tags = tuple(sorted(set(self.tags)))

    def __str__(self):
        return f"Problem {self.id}"

    def clean(self):
        errors = {}
        if not self.id.strip():
            errors['id'] = 'id must not be empty.'
        if not self.question.strip():
            errors['question'] = 'question must not be empty.'
        elif count_option_lines(self.question) >= 2:
            errors['question'] = 'question still contains an enumerated option list.'
        if not self.ground_truth.strip():
            errors['ground_truth'] = 'ground_truth must not be empty.'
        elif _INLINE_LABEL_RE.search(self.ground_truth):
            errors['ground_truth'] = 'ground_truth contains an option label.'
        if errors:
            raise ValidationError(errors)


@dataclass(frozen=True)
class BankSplit:
    """Search / RL partition of a problem bank."""
    search_set: tuple
    rl_set: tuple
    seed: int

    def clean(self):
        overlap = set(self.search_set) & set(self.rl_set)
        if overlap:
            raise ValidationError({'rl_set': f'{len(overlap)} ids appear in both sets.'})
