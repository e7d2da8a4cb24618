import re


_WHITESPACE_RE = re.compile(r'\s+')


def normalize_text(text):
    """Lowercase and collapse every whitespace run to a single space; the ends are not trimmed."""
    return _WHITESPACE_RE.sub(' ', text.lower())
