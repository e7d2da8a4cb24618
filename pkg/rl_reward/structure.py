from .models import RESPONSE_HEADER, THINKING_HEADER, StructuredOutput


def render_structured(think, answer):
    """Think-then-answer layout shared by SFT records and sandbox rollouts."""
    return f'{THINKING_HEADER}\n{think.strip()}\n\n{RESPONSE_HEADER}\n{answer.strip()}'


def parse_structure(raw):
    """
    Split raw policy output into (think, answer).

    Both headers must appear, thinking first, each with non-blank text after
    it; anything else is null-structured.
    """
    start = raw.find(THINKING_HEADER)
    if start < 0:
        return StructuredOutput(raw)
    think_from = start + len(THINKING_HEADER)
    split = raw.find(RESPONSE_HEADER, think_from)
    if split < 0:
        return StructuredOutput(raw)
    think = raw[think_from:split].strip()
    answer = raw[split + len(RESPONSE_HEADER):].strip()
    if not think or not answer:
        return StructuredOutput(raw)
    return StructuredOutput(raw, think, answer)
