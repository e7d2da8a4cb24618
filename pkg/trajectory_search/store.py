import hashlib
import json
import re
from pathlib import Path

from problem_bank.bank import atomic_write_text

from .models import SearchTrace


_UNSAFE_RE = re.compile(r'[^A-Za-z0-9._-]')


class TraceStore:
    """One JSON file per problem id under a run directory's traces/ folder."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, problem_id):
        safe = _UNSAFE_RE.sub('_', problem_id)
        if safe != problem_id:
            safe = f'{safe}-{hashlib.sha1(problem_id.encode("utf-8")).hexdigest()[:8]}'
        return self.root / f'{safe}.json'

    def exists(self, problem_id):
        return self.path_for(problem_id).exists()

    def save(self, trace):
        text = json.dumps(trace.as_dict(), ensure_ascii=False, indent=2) + '\n'
        atomic_write_text(self.path_for(trace.problem_id), text)

    def load(self, problem_id):
        path = self.path_for(problem_id)
        if not path.exists():
            return None
        return SearchTrace.from_dict(json.loads(path.read_text(encoding='utf-8')))

    def load_many(self, problem_ids):
        traces = []
        for problem_id in problem_ids:
            trace = self.load(problem_id)
            if trace is not None:
                traces.append(trace)
        return traces
