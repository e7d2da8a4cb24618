from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models


PROBE_ERROR = 'error'


class Suitability(models.TextChoices):
    PASS = 'Pass', 'Pass'
    TOO_SIMPLE = 'Too Simple', 'Too simple'
    AMBIGUOUS_ANSWER = 'Ambiguous Answer', 'Ambiguous answer'
    NOT_REFORMULATABLE = 'Not Reformulatable', 'Not reformulatable'


class Stage(models.TextChoices):
    CHALLENGE_PROBE = 'challenge_probe', 'Challenge probe'
    LENGTH_FILTER = 'length_filter', 'Length filter'
    SUITABILITY_JUDGE = 'suitability_judge', 'Suitability judge'
    REFORMAT = 'reformat', 'Open-ended reformat'
    DEDUP = 'dedup', 'Duplicate question'
    ERROR = 'error', 'Unexpected error'


@dataclass
class ChallengeProbeResult:
    """
    Answers of the small probe models to one MCQ.

    probe_answers maps probe name to the chosen label, None when the reply
    had no usable letter, or PROBE_ERROR when the call failed.
    """
    mcq_id: str
    answer_label: str
    probe_answers: dict = field(default_factory=dict)
    question_length: int = 0

    @property
    def all_correct(self):
        # No probes means nothing was shown to be easy.
        if not self.probe_answers:
            return False
        return all(answer == self.answer_label for answer in self.probe_answers.values())

    def as_dict(self):
        return {
            'mcq_id': self.mcq_id,
            'probe_answers': self.probe_answers,
            'all_correct': self.all_correct,
            'question_length': self.question_length,
        }


@dataclass
class FilterVerdict:
    mcq_id: str
    verdict: str
    raw_judge_output: str
    reason: str = ''

    def clean(self):
        if self.verdict not in Suitability.values:
            raise ValidationError({'verdict': f'unknown verdict {self.verdict!r}.'})


@dataclass
class StageDrop:
    mcq_id: str
    stage: str
    reason: str

    def as_dict(self):
        return {'id': self.mcq_id, 'stage': str(self.stage), 'reason': self.reason}


@dataclass
class CurationReport:
    input_count: int = 0
    output_count: int = 0
    drops: list = field(default_factory=list)
    ingest_errors: list = field(default_factory=list)

    def stage_counts(self):
        counts = {stage: 0 for stage in Stage.values}
        for drop in self.drops:
            counts[str(drop.stage)] += 1
        return counts

    def clean(self):
        if self.input_count != self.output_count + len(self.drops):
            raise ValidationError({
                'drops': f'{self.input_count} inputs != {self.output_count} outputs + {len(self.drops)} drops.'
            })

    def as_dict(self):
        return {
            'input': self.input_count,
            'output': self.output_count,
            'dropped_by_stage': self.stage_counts(),
            'dropped': [drop.as_dict() for drop in self.drops],
            'ingest_errors': self.ingest_errors,
        }
