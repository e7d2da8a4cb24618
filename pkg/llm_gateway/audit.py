import json
import threading
from pathlib import Path

from django.conf import settings
from django.utils import timezone


def truncate(text, limit):
    if text is None or len(text) <= limit:
        return text
    return text[:limit] + f'... [{len(text) - limit} more chars]'


class AuditLog:
    """Append-only JSON-lines record of every gateway attempt."""

    def __init__(self, path, truncate_at=None):
        self.path = Path(path)
        self.truncate_at = truncate_at or settings.PIPELINE['AUDIT_TRUNCATE']
        self._lock = threading.Lock()

    def record(self, backend, request, reply, attempt):
        entry = {
            'ts': timezone.now().isoformat(),
            'backend': backend.name,
            'tag': request.tag,
            'request_hash': request.request_hash(),
            'attempt': attempt,
            'status': reply.status,
            'finish': str(reply.finish),
            'prompt': truncate(request.prompt, self.truncate_at),
            'reply': truncate(reply.content, self.truncate_at),
            'error': reply.error,
            'prompt_tokens': reply.prompt_tokens,
            'output_tokens': reply.output_tokens,
            'latency_ms': reply.latency_ms,
        }
        line = json.dumps(entry, ensure_ascii=False) + '\n'
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, 'a', encoding='utf-8') as handle:
                handle.write(line)
        return entry


def read_audit(path):
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]


def usage_totals(entries):
    return {
        'prompt_tokens': sum(entry['prompt_tokens'] for entry in entries),
        'output_tokens': sum(entry['output_tokens'] for entry in entries),
        'requests': len(entries),
    }
