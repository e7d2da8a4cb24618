from django.apps import AppConfig


class ProblemBankConfig(AppConfig):
    name = 'problem_bank'
    verbose_name = 'Problem bank'
