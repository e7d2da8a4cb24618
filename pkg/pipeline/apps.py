from django.apps import AppConfig


class PipelineConfig(AppConfig):
    name = 'pipeline'
    verbose_name = 'Pipeline commands'

    def ready(self):
        import pipeline.signals  # noqa
