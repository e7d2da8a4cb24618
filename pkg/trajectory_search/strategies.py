from django.core.exceptions import ValidationError

from llm_gateway.parsing import JsonExtractionError, extract_json
from llm_gateway.prompts import render_prompt

from .models import CotAction, CotStep, Strategy, conclusion_of


REFINEMENT_STRATEGIES = (Strategy.EXPLORE_NEW_PATH, Strategy.VERIFICATION, Strategy.CORRECTION)
# Backtracking needs a target j < i - 1, which first exists at i = 2.
BACKTRACKING_ITERATIONS = frozenset({2})

PROMPT_NAMES = {
    Strategy.INIT: 'search_init',
    Strategy.EXPLORE_NEW_PATH: 'search_explore_new_path',
    Strategy.BACKTRACKING: 'search_backtracking',
    Strategy.VERIFICATION: 'search_verification',
    Strategy.CORRECTION: 'search_correction',
}

_ACTIONS = {action.lower(): action for action in CotAction.values}


class CotFormatError(ValueError):
    pass


def allowed_strategies(iteration):
    if iteration < 1:
        raise ValueError(f'Strategies are sampled from iteration 1 on, got {iteration}')
    strategies = list(REFINEMENT_STRATEGIES)
    if iteration in BACKTRACKING_ITERATIONS:
        strategies.append(Strategy.BACKTRACKING)
    return strategies


def sample_strategy(iteration, rng):
    return rng.choice(allowed_strategies(iteration))


def sample_backtrack_target(iteration, rng):
    return rng.randrange(0, iteration - 1)


def render_step(step):
    if step.action == CotAction.INNER_THINKING:
        return f'{step.action}: {step.title}\n{step.content}'
    return f'{step.action}\n{step.content}'


def serialize_history(nodes):
    """Prior reasoning as numbered iterations, each listing its steps verbatim."""
    blocks = []
    for node in nodes:
        steps = '\n\n'.join(render_step(step) for step in node.steps)
        blocks.append(f'[Iteration {node.iteration}]\n{steps}')
    return '\n\n'.join(blocks)


def render_search_prompt(problem, strategy, history=()):
    if strategy == Strategy.INIT:
        return render_prompt(PROMPT_NAMES[strategy], Question=problem.question)
    return render_prompt(
        PROMPT_NAMES[strategy], Question=problem.question, Previous_CoT=serialize_history(history),
    )


def parse_cot_reply(content):
    """Parse a {"CoT": [...]} reply into (steps, answer)."""
    try:
        payload = extract_json(content)
    except JsonExtractionError as exc:
        raise CotFormatError('reply has no JSON object') from exc
    if not isinstance(payload, dict) or not isinstance(payload.get('CoT'), list) or not payload['CoT']:
        raise CotFormatError('reply JSON has no non-empty "CoT" list')

    steps = []
    for index, item in enumerate(payload['CoT']):
        if not isinstance(item, dict) or not isinstance(item.get('content'), str):
            raise CotFormatError(f'CoT step {index} has no text content')
        action = _ACTIONS.get(str(item.get('action', '')).strip().lower())
        if action is None:
            raise CotFormatError(f'CoT step {index} has unknown action {item.get("action")!r}')
        title = item.get('title') if action == CotAction.INNER_THINKING else None
        step = CotStep(action, item['content'].strip(), title.strip() if isinstance(title, str) else title)
        try:
            step.clean()
        except ValidationError as exc:
            raise CotFormatError(f'CoT step {index}: {exc.messages[0]}') from exc
        steps.append(step)

    answer = conclusion_of(steps)
    if not answer:
        raise CotFormatError('CoT has no Final Conclusion')
    return steps, answer
