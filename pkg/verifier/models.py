from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models


class VerifyMethod(models.TextChoices):
    LLM_JUDGE = 'llm_judge', 'LLM judge'
    EXACT_MATCH = 'exact_match', 'Exact match'


@dataclass
class Verdict:
    """Binary verifier outcome; value is None when the judge could not decide."""
    value: bool
    method: str
    raw: str = None
    error: str = ''

    @property
    def is_error(self):
        return self.value is None

    def clean(self):
        if self.method == VerifyMethod.LLM_JUDGE and self.raw is None:
            raise ValidationError({'raw': 'a judge verdict must keep the raw judge text.'})

    def as_dict(self):
        return {'value': self.value, 'method': str(self.method), 'raw': self.raw, 'error': self.error}


@dataclass
class AnnotatedSample:
    problem_id: str
    model_answer: str
    ground_truth: str
    human_label: bool

    def clean(self):
        errors = {
            name: f'{name} must not be empty.'
            for name in ('problem_id', 'model_answer', 'ground_truth')
            if not getattr(self, name).strip()
        }
        if errors:
            raise ValidationError(errors)


@dataclass
class VerifierReport:
    method: str
    total: int = 0
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    verdicts: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def accuracy(self):
        return (self.total - self.fp - self.fn) / self.total if self.total else 0.0

    def as_dict(self):
        return {
            'method': str(self.method),
            'accuracy': self.accuracy,
            'total': self.total,
            'confusion': {'tp': self.tp, 'fp': self.fp, 'tn': self.tn, 'fn': self.fn},
            'errors': self.errors,
            'verdicts': self.verdicts,
        }
