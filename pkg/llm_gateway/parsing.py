import json
import re
from dataclasses import dataclass


_JSON_FENCE_RE = re.compile(r'```[ \t]*json[^\n]*\n(.*?)```', re.DOTALL | re.IGNORECASE)
_ANY_FENCE_RE = re.compile(r'```[^\n]*\n(.*?)```', re.DOTALL)


class JsonExtractionError(ValueError):
    def __init__(self, raw, message='No parseable JSON found in reply'):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class ExtractedJson:
    value: object
    start: int
    end: int


def _try_load(text, start, end):
    try:
        return ExtractedJson(json.loads(text[start:end]), start, end)
    except json.JSONDecodeError:
        return None


def _fenced(text, pattern):
    for match in pattern.finditer(text):
        found = _try_load(text, match.start(1), match.end(1))
        if found is not None:
            return found
    return None


def _balanced_end(text, start):
    """Index just past the brace closing text[start], honouring JSON strings."""
    depth = 0
    in_string = escaped = False
    for index in range(start, len(text)):
        char = text[index]
        if in_string:
            if escaped:
                escaped = False
            elif char == '\\':
                escaped = True
            elif char == '"':
                in_string = False
        elif char == '"':
            in_string = True
        elif char == '{':
            depth += 1
        elif char == '}':
            depth -= 1
            if depth == 0:
                return index + 1
    return None


def _balanced(text):
    start = text.find('{')
    while start != -1:
        end = _balanced_end(text, start)
        if end is not None:
            found = _try_load(text, start, end)
            if found is not None:
                return found
        start = text.find('{', start + 1)
    return None


def extract_json_span(text):
    """
    Locate the JSON value in a model reply.

    Tried in order: a ```json fenced block, any fenced block, then the first
    balanced {...} span that parses.
    """
    for finder in (
        lambda: _fenced(text, _JSON_FENCE_RE),
        lambda: _fenced(text, _ANY_FENCE_RE),
        lambda: _balanced(text),
    ):
        found = finder()
        if found is not None:
            return found
    raise JsonExtractionError(text)


def extract_json(text):
    return extract_json_span(text).value
