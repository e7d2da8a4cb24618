import hashlib
import json
import os
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

from llm_gateway.backends import OpenAICompatibleBackend, ScriptedBackend
from rl_reward.models import PpoConfig
from verifier.models import VerifyMethod


_ENV_RE = re.compile(r'\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}')

ROLES = ('probes', 'judge', 'reformatter', 'generator', 'verifier')
BACKEND_KINDS = ('scripted', 'openai')
ALL = 'all'


def interpolate(value, environ=None):
    """Expand ${VAR} and ${VAR:-default} in every string of a parsed TOML tree."""
    environ = os.environ if environ is None else environ
    if isinstance(value, dict):
        return {key: interpolate(item, environ) for key, item in value.items()}
    if isinstance(value, list):
        return [interpolate(item, environ) for item in value]
    if not isinstance(value, str):
        return value

    def expand(match):
        name, default = match.group(1), match.group(2)
        if name in environ:
            return environ[name]
        if default is not None:
            return default
        raise ImproperlyConfigured(f'Config references ${{{name}}} but the environment variable {name} is not set')

    return _ENV_RE.sub(expand, value)


@dataclass
class BackendSpec:
    name: str
    kind: str
    script: str = None
    base_url: str = None
    model: str = None
    api_key_env: str = None
    requests_per_minute: float = None
    timeout: float = None

    def clean(self):
        if self.kind not in BACKEND_KINDS:
            raise ImproperlyConfigured(f'Backend "{self.name}": kind must be one of {", ".join(BACKEND_KINDS)}')
        if self.kind == 'scripted' and not self.script:
            raise ImproperlyConfigured(f'Backend "{self.name}": a scripted backend needs "script"')
        if self.kind == 'openai' and not (self.base_url and self.model and self.api_key_env):
            raise ImproperlyConfigured(f'Backend "{self.name}": needs base_url, model and api_key_env')

    def as_dict(self):
        return {key: value for key, value in vars(self).items() if value is not None}

    def build(self, audit_log=None):
        if self.kind == 'scripted':
            return ScriptedBackend.from_file(self.name, self.script, audit_log=audit_log)
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise ImproperlyConfigured(
                f'Backend "{self.name}" needs an API key in the environment variable {self.api_key_env}'
            )
        conf = settings.PIPELINE
        return OpenAICompatibleBackend(
            self.name,
            self.base_url,
            self.model,
            api_key,
            timeout=self.timeout or conf['REQUEST_TIMEOUT'],
            requests_per_minute=self.requests_per_minute or conf['REQUESTS_PER_MINUTE'],
            audit_log=audit_log,
        )


@dataclass
class RunConfig:
    """A run's resolved configuration: TOML values over the PIPELINE settings defaults."""
    source: str
    seed: int = 0
    max_depth: int = 3
    max_attempts: int = 3
    min_question_chars: int = 120
    judge_retries: int = 2
    reformat_retries: int = 2
    workers: int = 4
    sft_fraction: float = 0.5
    verifier_method: str = VerifyMethod.LLM_JUDGE
    decontamination_window: int = 64
    include_answer: bool = False
    cot_variant: str = 'complex'
    recipe: dict = field(default_factory=dict)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    paths: dict = field(default_factory=dict)
    backends: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path, *, seed=None, max_depth=None, max_attempts=None, workers=None, reference_ppo=False):
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding='utf-8'))
        except OSError as exc:
            raise ImproperlyConfigured(f'Cannot read config {path}: {exc}') from exc
        except tomllib.TOMLDecodeError as exc:
            raise ImproperlyConfigured(f'Config {path} is not valid TOML: {exc}') from exc
        data = interpolate(raw)
        base_dir = path.resolve().parent
        conf = settings.PIPELINE

        limits = data.get('limits', {})
        curation = data.get('curation', {})
        verifier = data.get('verifier', {})
        decontamination = data.get('decontamination', {})
        config = cls(
            source=str(path.resolve()),
            seed=data.get('seed', 0) if seed is None else seed,
            max_depth=max_depth or limits.get('max_depth', conf['MAX_DEPTH']),
            max_attempts=max_attempts or limits.get('max_attempts', conf['MAX_ATTEMPTS']),
            min_question_chars=curation.get('min_question_chars', conf['MIN_QUESTION_CHARS']),
            judge_retries=curation.get('judge_retries', conf['JUDGE_RETRIES']),
            reformat_retries=curation.get('reformat_retries', conf['REFORMAT_RETRIES']),
            workers=workers or data.get('workers', conf['WORKERS']),
            sft_fraction=data.get('split', {}).get('sft_fraction', 0.5),
            verifier_method=verifier.get('method', VerifyMethod.LLM_JUDGE),
            decontamination_window=decontamination.get('window', conf['DECONTAMINATION_WINDOW']),
            include_answer=decontamination.get('include_answer', False),
            cot_variant=data.get('synthesis', {}).get('cot_variant', 'complex'),
            recipe={'searched': ALL, 'unconverted': 0, 'general': 0, **data.get('recipe', {})},
            paths={name: str((base_dir / value).resolve()) for name, value in data.get('paths', {}).items()},
            roles=data.get('roles', {}),
        )

        ppo = {'seed': config.seed, **data.get('ppo', {})}
        try:
            config.ppo = PpoConfig.reference(**ppo) if reference_ppo else PpoConfig(**ppo)
        except TypeError as exc:
            raise ImproperlyConfigured(f'Invalid [ppo] section: {exc}') from exc

        for name, options in data.get('backends', {}).items():
            options = dict(options)
            if options.get('script'):
                options['script'] = str((base_dir / options['script']).resolve())
            try:
                spec = BackendSpec(name=name, **options)
            except TypeError as exc:
                raise ImproperlyConfigured(f'Invalid backend "{name}": {exc}') from exc
            spec.clean()
            config.backends[name] = spec

        config.clean()
        return config

    def clean(self):
        if self.max_depth < 1 or self.max_attempts < 1:
            raise ImproperlyConfigured('max_depth and max_attempts must both be >= 1')
        if not 0 < self.sft_fraction < 1:
            raise ImproperlyConfigured('split.sft_fraction must lie strictly between 0 and 1')
        if self.verifier_method not in VerifyMethod.values:
            raise ImproperlyConfigured(f'verifier.method must be one of {", ".join(VerifyMethod.values)}')
        unknown_roles = set(self.roles) - set(ROLES)
        if unknown_roles:
            raise ImproperlyConfigured(f'Unknown roles: {", ".join(sorted(unknown_roles))}')
        for key, value in self.recipe.items():
            if key not in ('searched', 'unconverted', 'general'):
                raise ImproperlyConfigured(f'Unknown recipe entry "{key}"')
            if value != ALL and (not isinstance(value, int) or value < 0):
                raise ImproperlyConfigured(f'recipe.{key} must be a count >= 0 or "all"')

    def path(self, name, required=True):
        value = self.paths.get(name)
        if value is None and required:
            raise ImproperlyConfigured(f'paths.{name} is not configured')
        return Path(value) if value else None

    def require_roles(self, *roles):
        for role in roles:
            names = self.roles.get(role)
            if not names:
                raise ImproperlyConfigured(f'Role "{role}" is not configured')
            for name in names if isinstance(names, list) else [names]:
                if name not in self.backends:
                    raise ImproperlyConfigured(f'Role "{role}" refers to unknown backend "{name}"')

    def build_backends(self, roles, audit_log=None):
        """Role -> backend (a list for probes); roles naming the same backend share one instance."""
        self.require_roles(*roles)
        built = {}

        def get(name):
            if name not in built:
                built[name] = self.backends[name].build(audit_log)
            return built[name]

        result = {}
        for role in roles:
            names = self.roles[role]
            result[role] = [get(name) for name in names] if isinstance(names, list) else get(names)
        return result

    def as_dict(self):
        return {
            'seed': self.seed,
            'max_depth': self.max_depth,
            'max_attempts': self.max_attempts,
            'min_question_chars': self.min_question_chars,
            'judge_retries': self.judge_retries,
            'reformat_retries': self.reformat_retries,
            'sft_fraction': self.sft_fraction,
            'verifier_method': str(self.verifier_method),
            'decontamination_window': self.decontamination_window,
            'include_answer': self.include_answer,
            'cot_variant': str(self.cot_variant),
            'recipe': self.recipe,
            'ppo': self.ppo.as_dict(),
            'paths': self.paths,
            'backends': {name: spec.as_dict() for name, spec in sorted(self.backends.items())},
            'roles': self.roles,
        }

    def config_hash(self):
        canonical = json.dumps(self.as_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
