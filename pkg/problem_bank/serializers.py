from django.core.exceptions import ValidationError as ModelValidationError
from rest_framework import serializers

from .models import McqRecord, VerifiableProblem


class DataclassSerializer(serializers.Serializer):
    """Serializer whose validated data builds a dataclass and runs its clean()."""
    record_class = None

    def validate(self, attrs):
        try:
            self.record_class(**attrs).clean()
        except ModelValidationError as exc:
            raise serializers.ValidationError(exc.message_dict)
        return attrs

    def create(self, validated_data):
        return self.record_class(**validated_data)


class McqRecordSerializer(DataclassSerializer):
    record_class = McqRecord

    id = serializers.CharField()
    question = serializers.CharField()
    options = serializers.DictField(child=serializers.CharField())
    answer_label = serializers.CharField()
    source = serializers.CharField(default='synthetic')
    language = serializers.CharField(default='en')


class VerifiableProblemSerializer(DataclassSerializer):
    record_class = VerifiableProblem

    id = serializers.CharField()
    question = serializers.CharField()
    ground_truth = serializers.CharField()
    origin_mcq_id = serializers.CharField(allow_null=True, default=None)
    tags = serializers.ListField(child=serializers.CharField(), default=list)

    def validate_tags(self, value):
        return tuple(value)


class RemovedRecordSerializer(serializers.Serializer):
    id = serializers.CharField()
    reason = serializers.CharField()
    evidence = serializers.CharField(allow_blank=True)
