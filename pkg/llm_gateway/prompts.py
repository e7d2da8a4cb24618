import re
from functools import lru_cache
from pathlib import Path

from django.conf import settings


PLACEHOLDERS = (
    'Question',
    'Options',
    'Answer',
    'Model Response',
    'Ground-true Answer',
    'Previous_CoT',
    'Thought_Process',
    'Complex_CoT',
)
_PLACEHOLDER_RE = re.compile('|'.join(re.escape('{' + name + '}') for name in PLACEHOLDERS))


class PromptError(Exception):
    pass


@lru_cache(maxsize=None)
def _read_template(path):
    try:
        return Path(path).read_text(encoding='utf-8')
    except OSError as exc:
        raise PromptError(f'Cannot read prompt template {path}: {exc}') from exc


def load_template(name):
    return _read_template(str(Path(settings.PIPELINE['PROMPT_DIR']) / f'{name}.txt'))


def render_template(template, values):
    """Substitute {Name} placeholders in one pass; every template placeholder needs a value."""
    present = {match.group(0)[1:-1] for match in _PLACEHOLDER_RE.finditer(template)}
    unknown = set(values) - present
    if unknown:
        raise PromptError(f'Template has no placeholder for: {", ".join(sorted(unknown))}')
    missing = present - set(values)
    if missing:
        raise PromptError(f'No value for placeholder: {", ".join(sorted(missing))}')
    return _PLACEHOLDER_RE.sub(lambda match: values[match.group(0)[1:-1]], template)


def render_prompt(name, **values):
    """
    Render a named template. Placeholders with spaces or dashes are passed
    with underscores: Model_Response, Ground_true_Answer.
    """
    keys = {key: key for key in PLACEHOLDERS}
    keys.update({key.replace(' ', '_').replace('-', '_'): key for key in PLACEHOLDERS})
    mapped = {}
    for key, value in values.items():
        if key not in keys:
            raise PromptError(f'Unknown placeholder {key!r}')
        mapped[keys[key]] = value
    return render_template(load_template(name), mapped)
