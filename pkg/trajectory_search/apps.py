from django.apps import AppConfig


class TrajectorySearchConfig(AppConfig):
    name = 'trajectory_search'
    verbose_name = 'Trajectory search'
