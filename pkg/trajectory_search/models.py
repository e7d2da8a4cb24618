from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models


class CotAction(models.TextChoices):
    INNER_THINKING = 'Inner Thinking', 'Inner thinking'
    FINAL_CONCLUSION = 'Final Conclusion', 'Final conclusion'
    VERIFICATION = 'Verification', 'Verification'


class Strategy(models.TextChoices):
    INIT = 'init', 'Initial CoT'
    EXPLORE_NEW_PATH = 'explore_new_path', 'Exploring New Paths'
    BACKTRACKING = 'backtracking', 'Backtracking'
    VERIFICATION = 'verification', 'Verification'
    CORRECTION = 'correction', 'Correction'


class Outcome(models.TextChoices):
    SUCCESS = 'success', 'Success'
    DISCARDED = 'discarded', 'Discarded'


@dataclass
class CotStep:
    action: str
    content: str
    title: str = None

    def clean(self):
        if self.action not in CotAction.values:
            raise ValidationError({'action': f'unknown action {self.action!r}.'})
        if self.action == CotAction.INNER_THINKING:
            if not (self.title or '').strip():
                raise ValidationError({'title': 'Inner Thinking steps need a title.'})
        elif self.title is not None:
            raise ValidationError({'title': f'{self.action} steps carry no title.'})

    def as_dict(self):
        data = {'action': str(self.action), 'content': self.content}
        if self.title is not None:
            data['title'] = self.title
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(action=data['action'], content=data['content'], title=data.get('title'))


def conclusion_of(steps):
    """Content of the last Final Conclusion step, or None."""
    for step in reversed(steps):
        if step.action == CotAction.FINAL_CONCLUSION:
            return step.content
    return None


@dataclass
class TrajectoryNode:
    """One reasoning/answer pair (e_i, y_i) of a search attempt."""
    iteration: int
    strategy: str
    steps: list
    answer: str
    verdict: bool = None
    target_j: int = None
    verifier_error: str = ''

    def clean(self):
        errors = {}
        if self.iteration < 0:
            errors['iteration'] = 'iteration must be >= 0.'
        elif (self.iteration == 0) != (self.strategy == Strategy.INIT):
            errors['strategy'] = 'the init strategy is used at iteration 0 and only there.'
        if conclusion_of(self.steps) is None:
            errors['steps'] = 'a node needs a Final Conclusion step.'
        elif self.answer != conclusion_of(self.steps):
            errors['answer'] = 'answer must be the last Final Conclusion.'
        if self.strategy == Strategy.BACKTRACKING:
            if self.target_j is None or not 0 <= self.target_j < self.iteration - 1:
                errors['target_j'] = f'backtracking target must lie in [0, {self.iteration - 2}].'
        elif self.target_j is not None:
            errors['target_j'] = 'only backtracking nodes carry a target.'
        if errors:
            raise ValidationError(errors)

    def as_dict(self):
        return {
            'iteration': self.iteration,
            'strategy': str(self.strategy),
            'target_j': self.target_j,
            'steps': [step.as_dict() for step in self.steps],
            'answer': self.answer,
            'verdict': self.verdict,
            'verifier_error': self.verifier_error,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            iteration=data['iteration'],
            strategy=data['strategy'],
            steps=[CotStep.from_dict(step) for step in data['steps']],
            answer=data['answer'],
            verdict=data.get('verdict'),
            target_j=data.get('target_j'),
            verifier_error=data.get('verifier_error', ''),
        )


@dataclass
class SearchAttempt:
    nodes: list = field(default_factory=list)
    abort_reason: str = ''

    def as_dict(self):
        return {'nodes': [node.as_dict() for node in self.nodes], 'abort_reason': self.abort_reason}

    @classmethod
    def from_dict(cls, data):
        return cls([TrajectoryNode.from_dict(node) for node in data['nodes']], data.get('abort_reason', ''))


@dataclass
class SearchTrace:
    """Everything one problem's stage-one search did, in order."""
    problem_id: str
    rng_seed: int
    max_depth: int
    max_attempts: int
    attempts: list = field(default_factory=list)
    outcome: str = Outcome.DISCARDED
    success: tuple = None

    @property
    def succeeded(self):
        return self.outcome == Outcome.SUCCESS

    def winning_nodes(self):
        if not self.succeeded:
            raise ValueError(f'Trace {self.problem_id} has no successful attempt')
        attempt_idx, node_idx = self.success
        return self.attempts[attempt_idx].nodes[:node_idx + 1]

    def final_answer(self):
        return self.winning_nodes()[-1].answer

    def iter_nodes(self):
        for attempt in self.attempts:
            yield from attempt.nodes

    def clean(self):
        errors = {}
        if len(self.attempts) > self.max_attempts:
            errors['attempts'] = f'{len(self.attempts)} attempts exceed the limit of {self.max_attempts}.'
        for index, attempt in enumerate(self.attempts):
            if len(attempt.nodes) > self.max_depth + 1:
                errors['attempts'] = f'attempt {index} has more than {self.max_depth + 1} nodes.'
            for node in attempt.nodes:
                node.clean()
        if self.succeeded:
            attempt_idx, node_idx = self.success
            nodes = self.attempts[attempt_idx].nodes
            if attempt_idx != len(self.attempts) - 1 or node_idx != len(nodes) - 1:
                errors['success'] = 'the verified node must be the last node of the last attempt.'
            elif nodes[node_idx].verdict is not True or sum(bool(n.verdict) for n in self.iter_nodes()) != 1:
                errors['success'] = 'only the terminal node of the winning attempt may verify.'
        elif any(node.verdict for node in self.iter_nodes()):
            errors['outcome'] = 'a discarded trace cannot contain a verified node.'
        if errors:
            raise ValidationError(errors)

    def as_dict(self):
        return {
            'problem_id': self.problem_id,
            'rng_seed': self.rng_seed,
            'max_depth': self.max_depth,
            'max_attempts': self.max_attempts,
            'outcome': str(self.outcome),
            'success': list(self.success) if self.success else None,
            'attempts': [attempt.as_dict() for attempt in self.attempts],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            problem_id=data['problem_id'],
            rng_seed=data['rng_seed'],
            max_depth=data['max_depth'],
            max_attempts=data['max_attempts'],
            attempts=[SearchAttempt.from_dict(attempt) for attempt in data['attempts']],
            outcome=data['outcome'],
            success=tuple(data['success']) if data.get('success') else None,
        )
