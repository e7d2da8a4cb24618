from django.apps import AppConfig


class SftSynthesisConfig(AppConfig):
    name = 'sft_synthesis'
    verbose_name = 'SFT data synthesis'
