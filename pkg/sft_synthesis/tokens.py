from django.conf import settings
from django.utils.module_loading import import_string


def whitespace_tokens(text):
    return len(text.split())


def get_token_counter(path=None):
    """Resolve the counter named by path, or by the TOKEN_COUNTER setting."""
    path = path or settings.PIPELINE['TOKEN_COUNTER']
    return path, import_string(path)
