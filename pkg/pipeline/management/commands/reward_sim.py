import random

import numpy as np
from django.core.management.base import CommandError

from pipeline.base import PipelineCommand
from pipeline.stages import load_success_set
from problem_bank.bank import write_jsonl
from rl_reward.sandbox import build_toy_bank, initial_kl, load_bank, mine_candidates, run_stage2_sandbox, write_bank
from verifier.checks import make_verifier
from verifier.models import VerifyMethod


WINDOW = 20


class Command(PipelineCommand):
    help = 'Run the PPO reward sandbox over a candidate bank and write the learning curve (metrics.jsonl)'
    stage = 'reward_sim'

    def add_stage_arguments(self, parser):
        parser.add_argument('--verifier', choices=VerifyMethod.values, default=VerifyMethod.EXACT_MATCH,
                            help='Verifier scoring the sampled answers')
        parser.add_argument('--toy-problems', type=int, default=50, help='Problems in the generated toy bank')
        parser.add_argument('--candidates', type=int, default=4, help='Candidates per problem')
        parser.add_argument('--mine-from-traces', action='store_true',
                            help='Build the bank from the run\'s successful search traces')

    def configure(self, config, options):
        config.ppo.clean()

    def required_roles(self, config, options):
        return ('verifier',) if options['verifier'] == VerifyMethod.LLM_JUDGE else ()

    def build_bank(self, config, run_dir, options):
        if options['mine_from_traces']:
            rng = random.Random(config.seed)
            bank = []
            for problem, trace in load_success_set(run_dir):
                try:
                    bank.append(mine_candidates(problem, trace, options['candidates'], rng))
                except ValueError as exc:
                    self.stdout.write(self.style.WARNING(f'{problem.id}: {exc}'))
            sizes = {len(problem.candidates) for problem in bank}
            if len(sizes) > 1:
                smallest = min(sizes)
                bank = [problem for problem in bank if len(problem.candidates) == smallest]
            return bank
        bank_path = config.path('bank', required=False)
        if bank_path is not None:
            return load_bank(bank_path)
        return build_toy_bank(options['toy_problems'], options['candidates'])

    def execute_stage(self, config, run_dir, backends, options):
        bank = self.build_bank(config, run_dir, options)
        if not bank:
            raise CommandError('The candidate bank is empty')
        verify = make_verifier(options['verifier'], backends.get('verifier'))
        result = run_stage2_sandbox(bank, config.ppo, verify=verify, workers=config.workers)

        write_bank(bank, run_dir.path('sandbox_bank.jsonl'))
        write_jsonl(run_dir.path('metrics.jsonl'), result.curve)
        rewards = [row['mean_rule_reward'] for row in result.curve]
        summary = {
            'problems': len(bank),
            'candidates': len(bank[0].candidates),
            'updates': len(result.curve),
            'ppo': config.ppo.as_dict(),
            'first_window_reward': float(np.mean(rewards[:WINDOW])) if rewards else 0.0,
            'last_window_reward': float(np.mean(rewards[-WINDOW:])) if rewards else 0.0,
            'best_rule_reward': max(rewards, default=0.0),
            'final_rule_reward': result.final_rule_reward(),
            'total_variation': result.total_variation(),
            'kl_to_initial': initial_kl(result.policy, result.initial_policy),
        }
        run_dir.write_json('reward_summary.json', summary)
        counters = {key: summary[key] for key in ('problems', 'updates', 'final_rule_reward', 'total_variation')}
        return counters, ['sandbox_bank.jsonl', 'metrics.jsonl', 'reward_summary.json']
