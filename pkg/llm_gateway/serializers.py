import re

from rest_framework import serializers

from .models import ScriptEntry


class ScriptEntrySerializer(serializers.Serializer):
    """One line of a script file: {"tag", "content"?, "reply" | "replies"}."""
    tag = serializers.CharField()
    content = serializers.CharField(allow_null=True, default=None)
    reply = serializers.CharField(allow_blank=True, trim_whitespace=False, required=False)
    replies = serializers.ListField(
        child=serializers.CharField(allow_blank=True, trim_whitespace=False),
        required=False,
    )

    def validate(self, attrs):
        if ('reply' in attrs) == ('replies' in attrs):
            raise serializers.ValidationError('Give exactly one of "reply" or "replies".')
        if 'replies' in attrs and not attrs['replies']:
            raise serializers.ValidationError({'replies': 'A reply sequence must not be empty.'})
        for name in ('tag', 'content'):
            if attrs.get(name) is None:
                continue
            try:
                re.compile(attrs[name])
            except re.error as exc:
                raise serializers.ValidationError({name: f'Invalid pattern: {exc}'})
        return attrs

    def create(self, validated_data):
        if 'reply' in validated_data:
            replies, repeat = [validated_data['reply']], True
        else:
            replies, repeat = validated_data['replies'], False
        return ScriptEntry(
            tag_pattern=validated_data['tag'],
            replies=replies,
            content_pattern=validated_data.get('content'),
            repeat=repeat,
        )
