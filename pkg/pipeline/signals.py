import threading
from contextlib import contextmanager

from django.dispatch import receiver

from llm_gateway.signals import chat_completed


class UsageMeter:
    """Token usage of the gateway calls made while a command runs."""

    def __init__(self):
        self.prompt_tokens = 0
        self.output_tokens = 0
        self.calls = 0
        self._lock = threading.Lock()

    def add(self, reply):
        with self._lock:
            self.prompt_tokens += reply.prompt_tokens
            self.output_tokens += reply.output_tokens
            self.calls += 1

    def as_dict(self):
        return {'prompt_tokens': self.prompt_tokens, 'output_tokens': self.output_tokens, 'calls': self.calls}


_active = []


@contextmanager
def metering(meter):
    _active.append(meter)
    try:
        yield meter
    finally:
        _active.remove(meter)


@receiver(chat_completed)
def record_usage(sender, backend, request, reply, **kwargs):
    """Add a finished call's usage to every active meter"""
    for meter in list(_active):
        meter.add(reply)
