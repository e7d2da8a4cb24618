from problem_bank.serializers import DataclassSerializer
from rest_framework import serializers

from .models import AnnotatedSample


class AnnotatedSampleSerializer(DataclassSerializer):
    record_class = AnnotatedSample

    problem_id = serializers.CharField()
    model_answer = serializers.CharField()
    ground_truth = serializers.CharField()
    human_label = serializers.BooleanField()
