import json
import logging
import threading
import time

import httpx

from .models import ChatReply, Finish
from .serializers import ScriptEntrySerializer


logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Fatal misconfiguration of a backend or its script."""


class BackendError(Exception):
    """A single attempt failed and must not be retried."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class TransientBackendError(BackendError):
    """A single attempt failed on transport, 429 or 5xx; retrying may help."""


class TokenBucket:
    """Requests-per-minute limiter shared by every caller of one backend."""

    def __init__(self, requests_per_minute, capacity=None, clock=time.monotonic, sleep=time.sleep):
        self.rate = requests_per_minute / 60.0
        self.capacity = capacity or max(1.0, requests_per_minute / 60.0)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            # Sleep outside the lock so other callers can refill/check.
            self.sleep(wait)


class ChatBackend:
    kind = 'abstract'

    def __init__(self, name, requests_per_minute=None, audit_log=None):
        self.name = name
        self.audit_log = audit_log
        self.limiter = TokenBucket(requests_per_minute) if requests_per_minute else None

    def acquire(self):
        if self.limiter is not None:
            self.limiter.acquire()

    def send(self, request):
        raise NotImplementedError

    def describe(self):
        return {'name': self.name, 'kind': self.kind}

    def __str__(self):
        return f'{self.kind}:{self.name}'


class ScriptedBackend(ChatBackend):
    """Deterministic backend replaying ScriptEntry replies by tag."""
    kind = 'scripted'

    def __init__(self, name, entries, audit_log=None, source=None):
        super().__init__(name, audit_log=audit_log)
        self.entries = list(entries)
        self.source = source
        self._cursors = [0] * len(self.entries)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, name, path, audit_log=None):
        return cls(name, load_script(path), audit_log=audit_log, source=str(path))

    def send(self, request):
        with self._lock:
            for index, entry in enumerate(self.entries):
                if not entry.matches(request):
                    continue
                if entry.repeat:
                    content = entry.replies[0]
                else:
                    cursor = self._cursors[index]
                    if cursor >= len(entry.replies):
                        raise BackendError(
                            f'Script entry {entry.tag_pattern!r} exhausted for tag {request.tag!r}'
                        )
                    self._cursors[index] = cursor + 1
                    content = entry.replies[cursor]
                return ChatReply(
                    content=content,
                    finish=Finish.STOP,
                    prompt_tokens=len(request.prompt.split()),
                    output_tokens=len(content.split()),
                    status=200,
                )
        raise BackendError(f'No script entry matches tag {request.tag!r}')

    def describe(self):
        return {'name': self.name, 'kind': self.kind, 'script': self.source}


class OpenAICompatibleBackend(ChatBackend):
    """Wire client for an OpenAI-compatible /v1/chat/completions endpoint."""
    kind = 'openai'

    def __init__(self, name, base_url, model, api_key, timeout=60.0,
                 requests_per_minute=None, audit_log=None, transport=None):
        super().__init__(name, requests_per_minute=requests_per_minute, audit_log=audit_log)
        endpoint = base_url.rstrip('/')
        if not endpoint.endswith('/v1'):
            endpoint = f'{endpoint}/v1'
        self.base_url = endpoint
        self.model = model
        self.client = httpx.Client(
            base_url=endpoint,
            timeout=timeout,
            transport=transport,
            headers={'Authorization': f'Bearer {api_key}'},
        )

    def payload(self, request):
        return {
            'model': self.model,
            'messages': [message.as_dict() for message in request.messages],
            'temperature': request.temperature,
            'max_tokens': request.max_output_tokens,
        }

    def send(self, request):
        started = time.monotonic()
        try:
            response = self.client.post('/chat/completions', json=self.payload(request))
        except httpx.TransportError as exc:
            raise TransientBackendError(f'{type(exc).__name__}: {exc}') from exc
        latency_ms = int((time.monotonic() - started) * 1000)

        status = response.status_code
        if status == 429 or status >= 500:
            raise TransientBackendError(f'HTTP {status}: {response.text[:200]}', status=status)
        if status >= 400:
            raise BackendError(f'HTTP {status}: {response.text[:200]}', status=status)

        try:
            body = response.json()
            choice = body['choices'][0]
            content = choice['message']['content'] or ''
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f'Malformed completion body: {exc}', status=status) from exc

        finish = Finish.LENGTH if choice.get('finish_reason') == 'length' else Finish.STOP
        if finish == Finish.LENGTH and not content:
            raise BackendError('Reply truncated before any content', status=status)
        usage = body.get('usage') or {}
        return ChatReply(
            content=content,
            finish=finish,
            prompt_tokens=int(usage.get('prompt_tokens') or 0),
            output_tokens=int(usage.get('completion_tokens') or 0),
            latency_ms=latency_ms,
            status=status,
        )

    def describe(self):
        return {'name': self.name, 'kind': self.kind, 'base_url': self.base_url, 'model': self.model}

    def close(self):
        self.client.close()


def load_script(path):
    entries = []
    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise GatewayError(f'Cannot read script {path}: {exc}') from exc

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GatewayError(f'{path}:{line_no}: invalid JSON ({exc.msg})') from exc
        serializer = ScriptEntrySerializer(data=payload)
        if not serializer.is_valid():
            raise GatewayError(f'{path}:{line_no}: {serializer.errors}')
        entries.append(serializer.save())
    logger.debug('Loaded %d script entries from %s', len(entries), path)
    return entries
