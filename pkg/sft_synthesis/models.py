from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models


class Provenance(models.TextChoices):
    SEARCHED = 'searched', 'Searched and verified'
    UNCONVERTED_MCQ = 'unconverted_mcq', 'Unconverted multiple choice'
    GENERAL_DOMAIN = 'general_domain', 'General domain'


class CotVariant(models.TextChoices):
    COMPLEX = 'complex', 'Merged complex CoT'
    SIMPLE = 'simple', 'Initial CoT only'


class SkipStage(models.TextChoices):
    MERGE = 'merge', 'Merge'
    RESPONSE = 'response', 'Response'
    CONSISTENCY = 'consistency', 'Consistency gate'


# Residue of the structured search schema that must not leak into training text.
SCHEMA_MARKERS = (
    'Inner Thinking',
    'Final Conclusion',
    '"action"',
    '"CoT"',
    '"content"',
    '"title"',
    '"NaturalReasoning"',
)


def find_schema_marker(text):
    for marker in SCHEMA_MARKERS:
        if marker in text:
            return marker
    return None


@dataclass
class SftRecord:
    """One question, complex CoT and response training example."""
    problem_id: str
    question: str
    complex_cot: str
    response: str
    provenance: str = Provenance.SEARCHED

    @property
    def id(self):
        return self.problem_id

    def __str__(self):
        return f"SFT {self.problem_id} ({self.provenance})"

    def clean(self):
        errors = {}
        if self.provenance not in Provenance.values:
            errors['provenance'] = f'unknown provenance {self.provenance!r}.'
        elif (self.provenance == Provenance.UNCONVERTED_MCQ) != (not self.complex_cot.strip()):
            errors['complex_cot'] = 'complex_cot is empty exactly for unconverted multiple-choice records.'
        else:
            marker = find_schema_marker(self.complex_cot)
            if marker:
                errors['complex_cot'] = f'complex_cot contains the schema marker {marker!r}.'
        if not self.question.strip():
            errors['question'] = 'question must not be empty.'
        if not self.response.strip():
            errors['response'] = 'response must not be empty.'
        if errors:
            raise ValidationError(errors)


@dataclass
class SynthesisSkip:
    problem_id: str
    stage: str
    reason: str

    def as_dict(self):
        return {'problem_id': self.problem_id, 'stage': str(self.stage), 'reason': self.reason}


@dataclass
class DatasetRecipe:
    searched: int = 0
    unconverted: int = 0
    general: int = 0

    def clean(self):
        negative = {name: f'{name} must be >= 0.' for name, value in self.as_dict().items() if value < 0}
        if negative:
            raise ValidationError(negative)

    def as_dict(self):
        return {'searched': self.searched, 'unconverted': self.unconverted, 'general': self.general}


@dataclass
class DatasetStats:
    record_count: int = 0
    mean_cot_tokens: float = 0.0
    mean_response_tokens: float = 0.0
    mean_total_tokens: float = 0.0
    provenance_counts: dict = field(default_factory=dict)
    token_counter: str = ''

    def clean(self):
        if sum(self.provenance_counts.values()) != self.record_count:
            raise ValidationError({'provenance_counts': 'provenance counts must add up to record_count.'})

    def as_dict(self):
        return {
            'record_count': self.record_count,
            'mean_cot_tokens': self.mean_cot_tokens,
            'mean_response_tokens': self.mean_response_tokens,
            'mean_total_tokens': self.mean_total_tokens,
            'provenance_counts': dict(self.provenance_counts),
            'token_counter': self.token_counter,
        }
