import shutil

from pipeline.base import PipelineCommand
from pipeline.stages import load_curated_problems
from problem_bank.bank import split_problems, split_to_dict
from trajectory_search.models import Strategy
from trajectory_search.search import run_stage1
from trajectory_search.store import TraceStore
from trajectory_search.strategies import render_search_prompt
from verifier.checks import make_verifier
from verifier.models import VerifyMethod


class Command(PipelineCommand):
    help = 'Split the curated bank and search verified reasoning trajectories for the search share'
    stage = 'search'

    def required_roles(self, config, options):
        if config.verifier_method == VerifyMethod.LLM_JUDGE:
            return ('generator', 'verifier')
        return ('generator',)

    def search_problems(self, config, run_dir):
        problems = load_curated_problems(run_dir)
        split = split_problems(problems, config.sft_fraction, config.seed)
        chosen = set(split.search_set)
        return split, [problem for problem in problems if problem.id in chosen]

    def render_prompts(self, config, run_dir, options):
        _, problems = self.search_problems(config, run_dir)
        return [
            {'tag': f'search:{problem.id}:0:0:init', 'prompt': render_search_prompt(problem, Strategy.INIT)}
            for problem in problems
        ]

    def execute_stage(self, config, run_dir, backends, options):
        split, problems = self.search_problems(config, run_dir)
        config_hash = config.config_hash()
        split_path = run_dir.path('split.json')
        if split_path.exists() and run_dir.read_json('split.json').get('config_hash') != config_hash:
            # Stored traces were searched under another config and cannot be resumed.
            shutil.rmtree(run_dir.traces_dir, ignore_errors=True)
        run_dir.write_json('split.json', {**split_to_dict(split), 'config_hash': config_hash})

        verify = make_verifier(config.verifier_method, backends.get('verifier'))
        result = run_stage1(
            problems,
            backends['generator'],
            verify,
            TraceStore(run_dir.traces_dir),
            max_depth=config.max_depth,
            max_attempts=config.max_attempts,
            seed=config.seed,
            workers=config.workers,
        )
        summary = result.summary()
        run_dir.write_json('search_summary.json', {**summary, 'failures': result.failures})

        counters = {key: value for key, value in summary.items() if key != 'strategy_histogram'}
        counters['rl_set'] = len(split.rl_set)
        return counters, ['split.json', 'search_summary.json']
