import hashlib
import json
import re
from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models


class Role(models.TextChoices):
    SYSTEM = 'system', 'System'
    USER = 'user', 'User'
    ASSISTANT = 'assistant', 'Assistant'


class Finish(models.TextChoices):
    STOP = 'stop', 'Stop'
    LENGTH = 'length', 'Length limit'
    ERROR = 'error', 'Error'


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def as_dict(self):
        return {'role': str(self.role), 'content': self.content}


@dataclass
class ChatRequest:
    """One chat-completion call; tag identifies the call site in logs and scripts."""
    messages: list
    temperature: float = 0.0
    max_output_tokens: int = 2048
    tag: str = ''

    @classmethod
    def from_prompt(cls, prompt, *, tag, temperature, max_output_tokens, system=None):
        messages = []
        if system:
            messages.append(ChatMessage(Role.SYSTEM, system))
        messages.append(ChatMessage(Role.USER, prompt))
        return cls(messages, temperature, max_output_tokens, tag)

    def clean(self):
        errors = {}
        if not self.messages:
            errors['messages'] = 'messages must not be empty.'
        elif self.messages[-1].role != Role.USER:
            errors['messages'] = 'the last message must come from the user.'
        if self.temperature < 0:
            errors['temperature'] = 'temperature must be >= 0.'
        if self.max_output_tokens <= 0:
            errors['max_output_tokens'] = 'max_output_tokens must be positive.'
        if errors:
            raise ValidationError(errors)

    @property
    def prompt(self):
        return self.messages[-1].content

    def request_hash(self):
        payload = {
            'messages': [message.as_dict() for message in self.messages],
            'temperature': self.temperature,
            'max_output_tokens': self.max_output_tokens,
        }
        canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class ChatReply:
    content: str = ''
    finish: str = Finish.STOP
    prompt_tokens: int = 0
    output_tokens: int = 0
    latency_ms: int = 0
    error: str = ''
    status: int = None

    @classmethod
    def failure(cls, message, status=None, latency_ms=0):
        return cls(finish=Finish.ERROR, error=message, status=status, latency_ms=latency_ms)

    @property
    def ok(self):
        return self.finish != Finish.ERROR

    @property
    def usage(self):
        return self.prompt_tokens, self.output_tokens

    def clean(self):
        errors = {}
        if self.finish == Finish.LENGTH and not self.content:
            errors['content'] = 'a length-truncated reply must carry content.'
        if self.prompt_tokens < 0 or self.output_tokens < 0:
            errors['usage'] = 'token counts must be >= 0.'
        if errors:
            raise ValidationError(errors)


@dataclass
class ScriptEntry:
    """
    Canned reply for the scripted backend.

    The entry applies to requests whose tag matches tag_pattern (full match)
    and, when content_pattern is set, whose last user message contains a
    match for it. A single reply is served every time; a sequence of replies
    is consumed in order.
    """
    tag_pattern: str
    replies: list
    content_pattern: str = None
    repeat: bool = False
    _tag_re: re.Pattern = field(init=False, repr=False, compare=False)
    _content_re: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.replies = list(self.replies)
        self._tag_re = re.compile(self.tag_pattern)
        self._content_re = re.compile(self.content_pattern) if self.content_pattern else None

    def matches(self, request):
        if not self._tag_re.fullmatch(request.tag):
            return False
        return self._content_re is None or bool(self._content_re.search(request.prompt))

    def clean(self):
        if not self.replies:
            raise ValidationError({'replies': 'at least one reply is required.'})
