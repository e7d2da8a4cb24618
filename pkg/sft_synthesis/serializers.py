from problem_bank.serializers import DataclassSerializer
from rest_framework import serializers

from .models import Provenance, SftRecord


class SftRecordSerializer(DataclassSerializer):
    record_class = SftRecord

    problem_id = serializers.CharField()
    question = serializers.CharField()
    complex_cot = serializers.CharField(allow_blank=True, trim_whitespace=False, default='')
    response = serializers.CharField(trim_whitespace=False)
    provenance = serializers.ChoiceField(choices=Provenance.choices)


class GeneralRecordSerializer(SftRecordSerializer):
    """General-domain input files may leave provenance out."""
    provenance = serializers.ChoiceField(choices=Provenance.choices, default=Provenance.GENERAL_DOMAIN)
