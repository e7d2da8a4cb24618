import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from verifier.checks import verify_exact


THINKING_HEADER = '## Thinking'
RESPONSE_HEADER = '## Final Response'

REWARD_CORRECT = 1.0
REWARD_INCORRECT = 0.1
REWARD_NULL = 0.0
RULE_REWARDS = frozenset({REWARD_CORRECT, REWARD_INCORRECT, REWARD_NULL})


@dataclass(frozen=True)
class StructuredOutput:
    raw: str
    think: str = None
    answer: str = None

    @property
    def is_structured(self):
        return self.answer is not None

    def clean(self):
        if (self.think is None) != (self.answer is None):
            raise ValidationError({'answer': 'think and answer are both set or both empty.'})


@dataclass(frozen=True)
class RewardBreakdown:
    r_rule: float
    kl_term: float
    beta: float
    total: float

    def clean(self):
        errors = {}
        if self.r_rule not in RULE_REWARDS:
            errors['r_rule'] = f'{self.r_rule} is not a rule reward.'
        if self.kl_term < 0:
            errors['kl_term'] = 'kl_term must be >= 0.'
        if self.beta < 0:
            errors['beta'] = 'beta must be >= 0.'
        if not math.isclose(self.total, self.r_rule - self.beta * self.kl_term, rel_tol=0, abs_tol=1e-12):
            errors['total'] = 'total must equal r_rule - beta * kl_term.'
        if errors:
            raise ValidationError(errors)

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class SandboxProblem:
    """A problem with K candidate answers, exactly one of them verified."""
    problem_id: str
    ground_truth: str
    candidates: list

    @property
    def id(self):
        return self.problem_id

    def clean(self):
        errors = {}
        if len(self.candidates) < 2:
            errors['candidates'] = 'at least two candidates are needed.'
        elif sum(verify_exact(candidate, self.ground_truth).value for candidate in self.candidates) != 1:
            errors['candidates'] = 'exactly one candidate must match the ground truth.'
        if errors:
            raise ValidationError(errors)


@dataclass
class ToyPolicy:
    """Per-problem logits over candidate answers plus a per-problem value estimate."""
    logits: np.ndarray
    values: np.ndarray

    @classmethod
    def uniform(cls, problems, candidates):
        return cls(np.zeros((problems, candidates)), np.zeros(problems))

    def copy(self):
        return ToyPolicy(self.logits.copy(), self.values.copy())

    def log_probs(self):
        shifted = self.logits - self.logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def probs(self):
        return np.exp(self.log_probs())

    def clean(self):
        if not np.all(np.abs(self.probs().sum(axis=1) - 1.0) <= 1e-9):
            raise ValidationError({'logits': 'policy rows must sum to 1.'})


@dataclass(frozen=True)
class Transition:
    """One single-step episode: problem row, sampled candidate, its log-prob at sampling time, reward."""
    problem: int
    action: int
    old_logprob: float
    reward: float


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 0.05
    batch_size: int = 50
    beta: float = 0.03
    ppo_epochs: int = 3
    discount: float = 1.0
    value_coef: float = 1.0
    clip_range: float = 0.2
    seed: int = 0
    updates: int = 200

    @classmethod
    def reference(cls, **overrides):
        """
        Hyperparameters of the reference PPO run.

        The learning rate stays at sandbox scale; the LLM-scale run used 5e-7,
        far too small a step for toy logits.
        """
        options = {'clip_range': 0.2, 'beta': 0.03, 'ppo_epochs': 3, 'discount': 1.0, 'value_coef': 1.0,
                   'batch_size': 128}
        options.update(overrides)
        return cls(**options)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def clean(self):
        errors = {}
        if not 0 < self.clip_range < 1:
            errors['clip_range'] = 'clip_range must lie in (0, 1).'
        if not 0 < self.discount <= 1:
            errors['discount'] = 'discount must lie in (0, 1].'
        if self.learning_rate <= 0:
            errors['learning_rate'] = 'learning_rate must be positive.'
        if self.beta < 0:
            errors['beta'] = 'beta must be >= 0.'
        for name in ('batch_size', 'ppo_epochs', 'updates'):
            if getattr(self, name) < 1:
                errors[name] = f'{name} must be >= 1.'
        if errors:
            raise ValidationError(errors)

    def as_dict(self):
        return dataclasses.asdict(self)
