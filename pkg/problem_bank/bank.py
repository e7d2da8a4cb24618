import json
import logging
import os
import random
import tempfile
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from django.db import models

from .models import BankSplit
from .serializers import McqRecordSerializer, VerifiableProblemSerializer


logger = logging.getLogger(__name__)


class ProblemBankError(Exception):
    """Raised when a bank file cannot be read at all."""


class RecordFormat(models.TextChoices):
    MCQ_JSON = 'mcq_json', 'Multiple-choice records'
    VERIFIABLE_JSON = 'verifiable_json', 'Verifiable problems'


SERIALIZERS = {
    RecordFormat.MCQ_JSON: McqRecordSerializer,
    RecordFormat.VERIFIABLE_JSON: VerifiableProblemSerializer,
}


@dataclass
class IngestError:
    line: int
    record_id: str
    reason: str

    def as_dict(self):
        return {'line': self.line, 'id': self.record_id, 'reason': self.reason}


@dataclass
class IngestResult:
    records: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def format_serializer_errors(errors):
    parts = []
    for name, messages in errors.items():
        if isinstance(messages, dict):
            messages = [format_serializer_errors(messages)]
        parts.append(f"{name}: {' '.join(str(message) for message in messages)}")
    return '; '.join(parts)


def ingest(path, record_format):
    """Read a JSON-lines file into validated records plus a per-line error report."""
    return read_records(path, SERIALIZERS[RecordFormat(record_format)])


def read_records(path, serializer_class):
    result = IngestResult()
    seen_ids = set()

    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ProblemBankError(f'Cannot read {path}: {exc}') from exc

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            result.errors.append(IngestError(line_no, None, f'invalid JSON: {exc.msg}'))
            continue
        if not isinstance(payload, dict):
            result.errors.append(IngestError(line_no, None, 'record is not a JSON object'))
            continue

        serializer = serializer_class(data=payload)
        if not serializer.is_valid():
            result.errors.append(
                IngestError(line_no, payload.get('id'), format_serializer_errors(serializer.errors))
            )
            continue

        record = serializer.save()
        if record.id in seen_ids:
            result.errors.append(IngestError(line_no, record.id, 'duplicate id'))
            continue
        seen_ids.add(record.id)
        result.records.append(record)

    if result.errors:
        logger.warning('%s: %d records rejected, %d kept', path, len(result.errors), len(result.records))
    return result


def record_to_dict(record):
    for serializer_class in SERIALIZERS.values():
        if isinstance(record, serializer_class.record_class):
            return dict(serializer_class(record).data)
    raise TypeError(f'No serializer for {type(record).__name__}')


def dumps_line(payload):
    return json.dumps(payload, ensure_ascii=False)


def atomic_write_text(path, text):
    """Write text to path via a temporary sibling file and os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_jsonl(path, rows):
    text = ''.join(dumps_line(row) + '\n' for row in rows)
    atomic_write_text(path, text)


def dump_records(records, path):
    write_jsonl(path, (record_to_dict(record) for record in records))


def split_problems(problems, sft_fraction, seed):
    """Seeded split of a bank into the search share and the RL share."""
    if not 0 < sft_fraction < 1:
        raise ValueError(f'sft_fraction must be inside (0, 1), got {sft_fraction}')
    if not problems:
        raise ValueError('Cannot split an empty problem list')

    ids = [problem.id for problem in problems]
    if len(set(ids)) != len(ids):
        raise ValueError('Problem ids must be unique before splitting')

    random.Random(seed).shuffle(ids)
    search_size = int(
        (Decimal(str(sft_fraction)) * len(ids)).to_integral_value(rounding=ROUND_HALF_UP)
    )
    split = BankSplit(
        search_set=tuple(ids[:search_size]),
        rl_set=tuple(ids[search_size:]),
        seed=seed,
    )
    split.clean()
    return split


def split_to_dict(split):
    return {'search_set': list(split.search_set), 'rl_set': list(split.rl_set), 'seed': split.seed}


def split_from_dict(payload):
    return BankSplit(
        search_set=tuple(payload['search_set']),
        rl_set=tuple(payload['rl_set']),
        seed=payload['seed'],
    )
