from problem_bank.serializers import DataclassSerializer
from rest_framework import serializers

from .models import SandboxProblem


class SandboxProblemSerializer(DataclassSerializer):
    record_class = SandboxProblem

    problem_id = serializers.CharField()
    ground_truth = serializers.CharField()
    candidates = serializers.ListField(child=serializers.CharField(), min_length=2)


class MetricsRowSerializer(serializers.Serializer):
    iter = serializers.IntegerField(min_value=0)
    mean_rule_reward = serializers.FloatField()
    mean_kl = serializers.FloatField(min_value=0)
    clip_fraction = serializers.FloatField(min_value=0, max_value=1)
    mean_total = serializers.FloatField()
    skipped = serializers.IntegerField(min_value=0, default=0)
