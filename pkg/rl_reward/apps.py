from django.apps import AppConfig


class RlRewardConfig(AppConfig):
    name = 'rl_reward'
    verbose_name = 'RL reward and PPO sandbox'
