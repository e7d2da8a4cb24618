import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from django.db import models
from django.utils import timezone

from problem_bank.bank import atomic_write_text


logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
LOCK_NAME = '.lock'
AUDIT_NAME = 'audit.jsonl'
TRACES_DIR = 'traces'


class ManifestError(Exception):
    """The run directory is locked, corrupt, or belongs to another configuration."""


class StageStatus(models.TextChoices):
    RUNNING = 'running', 'Running'
    COMPLETE = 'complete', 'Complete'
    FAILED = 'failed', 'Failed'


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def add_usage(total, usage):
    return {key: total.get(key, 0) + usage.get(key, 0) for key in ('prompt_tokens', 'output_tokens', 'calls')}


@dataclass
class StageRecord:
    command: str
    started: str
    finished: str = None
    status: str = StageStatus.RUNNING
    counters: dict = field(default_factory=dict)
    usage: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            'command': self.command,
            'started': self.started,
            'finished': self.finished,
            'status': str(self.status),
            'counters': self.counters,
            'usage': self.usage,
            'artifacts': self.artifacts,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class RunManifest:
    """Per-run record of stages, their counters and artifact checksums, and total token usage."""
    config_hash: str = None
    stages: dict = field(default_factory=dict)
    usage: dict = field(default_factory=lambda: add_usage({}, {}))

    def as_dict(self):
        return {
            'config_hash': self.config_hash,
            'usage': self.usage,
            'stages': {name: record.as_dict() for name, record in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            config_hash=data.get('config_hash'),
            stages={name: StageRecord.from_dict(record) for name, record in data.get('stages', {}).items()},
            usage=add_usage({}, data.get('usage', {})),
        )


class RunDirectory:
    """run_dir/{manifest.json, traces/, audit.jsonl, <stage artifacts>}"""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name):
        return self.root / name

    @property
    def manifest_path(self):
        return self.path(MANIFEST_NAME)

    @property
    def audit_path(self):
        return self.path(AUDIT_NAME)

    @property
    def traces_dir(self):
        return self.path(TRACES_DIR)

    def write_json(self, name, payload):
        atomic_write_text(self.path(name), json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + '\n')

    def read_json(self, name):
        path = self.path(name)
        try:
            return json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError as exc:
            raise ManifestError(f'{path} is missing; run the stage that produces it first') from exc
        except json.JSONDecodeError as exc:
            raise ManifestError(f'{path} is not valid JSON: {exc}') from exc

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.path(LOCK_NAME)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ManifestError(
                f'{self.root} is in use by another command; delete {lock_path} if no command is running'
            ) from exc
        try:
            with os.fdopen(fd, 'w') as handle:
                handle.write(f'{os.getpid()}\n')
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    def load_manifest(self):
        if not self.manifest_path.exists():
            return RunManifest()
        try:
            return RunManifest.from_dict(json.loads(self.manifest_path.read_text(encoding='utf-8')))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f'{self.manifest_path} is corrupt: {exc}') from exc

    def save_manifest(self, manifest):
        atomic_write_text(self.manifest_path, json.dumps(manifest.as_dict(), ensure_ascii=False, indent=2) + '\n')

    def check_config(self, config_hash, force=False):
        """Load the manifest, refusing one written under another config hash unless forced."""
        manifest = self.load_manifest()
        if manifest.config_hash and manifest.config_hash != config_hash:
            if not force:
                raise ManifestError(
                    f'{self.root} was created with config hash {manifest.config_hash[:12]}, '
                    f'the current config hashes to {config_hash[:12]}; rerun with --force to replace it'
                )
            logger.warning('%s: config changed, earlier stage records are discarded', self.root)
            manifest.stages = {}
        return manifest

    def checksums(self, names):
        return {name: file_sha256(self.path(name)) for name in names}

    def stage_complete(self, manifest, command):
        record = manifest.stages.get(command)
        if record is None or record.status != StageStatus.COMPLETE:
            return False
        for name, checksum in record.artifacts.items():
            path = self.path(name)
            if not path.exists() or file_sha256(path) != checksum:
                logger.info('%s: artifact %s changed since the stage completed', self.root, name)
                return False
        return True

    def record_stage(self, manifest, record, config_hash):
        record.finished = timezone.now().isoformat()
        manifest.config_hash = config_hash
        manifest.stages[record.command] = record
        manifest.usage = add_usage(manifest.usage, record.usage)
        self.save_manifest(manifest)
        return manifest
