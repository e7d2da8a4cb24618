import logging

from django.core.exceptions import ImproperlyConfigured, ValidationError
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from llm_gateway.audit import AuditLog
from llm_gateway.backends import GatewayError
from problem_bank.bank import ProblemBankError, write_jsonl
from rl_reward.ppo import PpoError
from sft_synthesis.dataset import DatasetError

from .config import RunConfig
from .manifest import ManifestError, RunDirectory, StageRecord, StageStatus
from .signals import UsageMeter, metering


logger = logging.getLogger(__name__)

FATAL_ERRORS = (
    ImproperlyConfigured,
    ValidationError,
    ManifestError,
    ProblemBankError,
    GatewayError,
    DatasetError,
    PpoError,
)


class PipelineCommand(BaseCommand):
    """
    Shared flow of the stage commands.

    Backends are built before the run-directory lock is taken. Under the
    lock a stale config hash is refused, a completed stage is skipped, and
    the stage runs under a usage meter before its manifest record is written.
    """
    stage = None
    roles = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Run configuration (TOML)')
        parser.add_argument('--run-dir', required=True, help='Directory for artifacts, traces and the manifest')
        parser.add_argument('--seed', type=int, help='Override the configured seed')
        parser.add_argument('--max-depth', type=int, help='Override N, the refinement depth limit per attempt')
        parser.add_argument('--max-attempts', type=int, help='Override T, the attempt limit per problem')
        parser.add_argument('--workers', type=int, help='Override the worker count')
        parser.add_argument('--paper-config', action='store_true', help='Use the reference PPO hyperparameters')
        parser.add_argument('--dry-run', action='store_true', help='Render prompts without calling any backend')
        parser.add_argument('--force', action='store_true', help='Rerun a completed stage or replace a stale config')
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def required_roles(self, config, options):
        return self.roles

    def configure(self, config, options):
        """Apply stage-specific options to the loaded config."""

    def render_prompts(self, config, run_dir, options):
        """Rows of {tag, prompt} the stage would send first."""
        return []

    def execute_stage(self, config, run_dir, backends, options):
        """Run the stage; return (counters, artifact names relative to the run dir)."""
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            self.run(options)
        except FATAL_ERRORS as exc:
            message = '; '.join(exc.messages) if isinstance(exc, ValidationError) else str(exc)
            raise CommandError(message) from exc

    def run(self, options):
        config = RunConfig.from_file(
            options['config'],
            seed=options['seed'],
            max_depth=options['max_depth'],
            max_attempts=options['max_attempts'],
            workers=options['workers'],
            reference_ppo=options['paper_config'],
        )
        self.configure(config, options)
        run_dir = RunDirectory(options['run_dir'])
        roles = self.required_roles(config, options)

        if options['dry_run']:
            config.require_roles(*roles)
            rows = self.render_prompts(config, run_dir, options)
            write_jsonl(run_dir.path('dry_run.jsonl'), rows)
            self.stdout.write(self.style.SUCCESS(
                f'{self.stage}: dry run rendered {len(rows)} prompts into {run_dir.path("dry_run.jsonl")}'
            ))
            return

        backends = config.build_backends(roles, AuditLog(run_dir.audit_path))
        config_hash = config.config_hash()
        with run_dir.lock():
            manifest = run_dir.check_config(config_hash, options['force'])
            if not options['force'] and run_dir.stage_complete(manifest, self.stage):
                self.stdout.write(self.style.WARNING(
                    f'{self.stage}: already complete in {run_dir.root}, nothing to do (use --force to rerun)'
                ))
                return

            record = StageRecord(self.stage, started=timezone.now().isoformat())
            meter = UsageMeter()
            try:
                with metering(meter):
                    counters, artifacts = self.execute_stage(config, run_dir, backends, options)
            except BaseException:
                record.status = StageStatus.FAILED
                record.usage = meter.as_dict()
                run_dir.record_stage(manifest, record, config_hash)
                raise

            record.status = StageStatus.COMPLETE
            record.counters = counters
            record.usage = meter.as_dict()
            record.artifacts = run_dir.checksums(artifacts)
            run_dir.record_stage(manifest, record, config_hash)

        logger.info('%s finished in %s: %s', self.stage, run_dir.root, counters)
        self.stdout.write(self.style.SUCCESS(f'{self.stage}: {counters}'))
