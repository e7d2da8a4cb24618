import json
import tempfile
from pathlib import Path

import httpx
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from .audit import AuditLog, read_audit, truncate, usage_totals
from .backends import GatewayError, OpenAICompatibleBackend, ScriptedBackend, TokenBucket, load_script
from .gateway import complete
from .models import ChatMessage, ChatRequest, Finish, Role, ScriptEntry
from .parsing import JsonExtractionError, extract_json, extract_json_span
from .prompts import PromptError, render_prompt, render_template
from .signals import chat_completed


def build_request(prompt='What enzyme traps glucose?', tag='test:1', temperature=0.0):
    return ChatRequest.from_prompt(prompt, tag=tag, temperature=temperature, max_output_tokens=64)


class GatewayTestMixin:
    def make_tempdir(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)

    def make_http_backend(self, handler, audit_log=None):
        backend = OpenAICompatibleBackend(
            'judge',
            base_url='https://llm.example.test',
            model='test-model',
            api_key='secret',
            audit_log=audit_log,
            transport=httpx.MockTransport(handler),
        )
        self.addCleanup(backend.close)
        return backend

    def completion_body(self, content, finish_reason='stop'):
        return {
            'choices': [{'message': {'role': 'assistant', 'content': content}, 'finish_reason': finish_reason}],
            'usage': {'prompt_tokens': 11, 'completion_tokens': 3},
        }


class ChatRequestTests(SimpleTestCase):
    def test_last_message_must_be_user(self):
        request = ChatRequest([ChatMessage(Role.USER, 'hi'), ChatMessage(Role.ASSISTANT, 'hello')])
        with self.assertRaises(ValidationError) as ctx:
            request.clean()
        self.assertIn('messages', ctx.exception.message_dict)

    def test_negative_temperature_rejected(self):
        with self.assertRaises(ValidationError):
            build_request(temperature=-0.1).clean()

    def test_request_hash_ignores_tag(self):
        self.assertEqual(
            build_request(tag='a').request_hash(),
            build_request(tag='b').request_hash(),
        )
        self.assertNotEqual(build_request('x').request_hash(), build_request('y').request_hash())


class ScriptedBackendTests(GatewayTestMixin, SimpleTestCase):
    def test_matching_entry_replies_with_stop(self):
        backend = ScriptedBackend('gen', [ScriptEntry(r'test:.*', ['hexokinase'], repeat=True)])
        reply = complete(backend, build_request())
        self.assertEqual(reply.content, 'hexokinase')
        self.assertEqual(reply.finish, Finish.STOP)

    def test_unmatched_tag_returns_error_naming_tag(self):
        backend = ScriptedBackend('gen', [ScriptEntry(r'other', ['x'], repeat=True)])
        reply = complete(backend, build_request(tag='verifier:p7'))
        self.assertEqual(reply.finish, Finish.ERROR)
        self.assertIn('verifier:p7', reply.error)

    def test_sequence_is_consumed_then_exhausted(self):
        backend = ScriptedBackend('gen', [ScriptEntry(r'test:1', ['first', 'second'])])
        self.assertEqual(complete(backend, build_request()).content, 'first')
        self.assertEqual(complete(backend, build_request()).content, 'second')
        reply = complete(backend, build_request())
        self.assertEqual(reply.finish, Finish.ERROR)
        self.assertIn('exhausted', reply.error)

    def test_content_pattern_selects_entry(self):
        backend = ScriptedBackend('gen', [
            ScriptEntry(r'.*', ['about insulin'], content_pattern='insulin', repeat=True),
            ScriptEntry(r'.*', ['fallback'], repeat=True),
        ])
        self.assertEqual(complete(backend, build_request('Where is insulin made?')).content, 'about insulin')
        self.assertEqual(complete(backend, build_request('Where is bile made?')).content, 'fallback')

    def test_scripted_runs_produce_identical_audit(self):
        logs = []
        for run in range(2):
            audit_path = self.make_tempdir() / 'audit.jsonl'
            backend = ScriptedBackend(
                'gen', [ScriptEntry(r'test:.*', ['a', 'b', 'c'])], audit_log=AuditLog(audit_path, 500),
            )
            replies = [complete(backend, build_request(f'q{i}')).content for i in range(3)]
            self.assertEqual(replies, ['a', 'b', 'c'])
            logs.append([{k: v for k, v in entry.items() if k != 'ts'} for entry in read_audit(audit_path)])
        self.assertEqual(logs[0], logs[1])

    def test_load_script_from_file(self):
        path = self.make_tempdir() / 'script.jsonl'
        path.write_text(
            json.dumps({'tag': 'judge:.*', 'reply': 'Pass'}) + '\n'
            + json.dumps({'tag': 'gen:.*', 'content': 'enzyme', 'replies': ['one', 'two']}) + '\n',
            encoding='utf-8',
        )
        entries = load_script(path)
        self.assertTrue(entries[0].repeat)
        self.assertEqual(entries[1].replies, ['one', 'two'])
        self.assertEqual(entries[1].content_pattern, 'enzyme')

    def test_load_script_rejects_entry_with_both_reply_kinds(self):
        path = self.make_tempdir() / 'script.jsonl'
        path.write_text(json.dumps({'tag': 'x', 'reply': 'a', 'replies': ['b']}) + '\n', encoding='utf-8')
        with self.assertRaises(GatewayError):
            load_script(path)


class OpenAICompatibleBackendTests(GatewayTestMixin, SimpleTestCase):
    def setUp(self):
        self.audit_path = self.make_tempdir() / 'audit.jsonl'
        self.audit = AuditLog(self.audit_path, 500)
        self.sleeps = []

    def test_payload_and_reply_parsing(self):
        seen = {}

        def handler(request):
            seen['url'] = str(request.url)
            seen['auth'] = request.headers['Authorization']
            seen['body'] = json.loads(request.content)
            return httpx.Response(200, json=self.completion_body('True'))

        reply = complete(self.make_http_backend(handler), build_request())
        self.assertEqual(seen['url'], 'https://llm.example.test/v1/chat/completions')
        self.assertEqual(seen['auth'], 'Bearer secret')
        self.assertEqual(seen['body']['model'], 'test-model')
        self.assertEqual(seen['body']['max_tokens'], 64)
        self.assertEqual(seen['body']['messages'], [{'role': 'user', 'content': 'What enzyme traps glucose?'}])
        self.assertEqual(reply.content, 'True')
        self.assertEqual(reply.usage, (11, 3))

    def test_429_twice_then_success(self):
        statuses = iter([429, 429, 200])

        def handler(request):
            status = next(statuses)
            if status == 200:
                return httpx.Response(200, json=self.completion_body('ok'))
            return httpx.Response(status, text='slow down')

        backend = self.make_http_backend(handler, audit_log=self.audit)
        reply = complete(backend, build_request(), backoff=1.0, sleep=self.sleeps.append)
        self.assertEqual(reply.content, 'ok')
        self.assertEqual(self.sleeps, [1.0, 2.0])
        entries = read_audit(self.audit_path)
        self.assertEqual([entry['status'] for entry in entries], [429, 429, 200])
        self.assertEqual([entry['attempt'] for entry in entries], [1, 2, 3])

    def test_client_error_is_not_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(401, text='bad key')

        backend = self.make_http_backend(handler, audit_log=self.audit)
        reply = complete(backend, build_request(), sleep=self.sleeps.append)
        self.assertEqual(reply.finish, Finish.ERROR)
        self.assertEqual(reply.status, 401)
        self.assertEqual(len(calls), 1)
        self.assertEqual(self.sleeps, [])

    def test_server_errors_exhaust_retries(self):
        def handler(request):
            return httpx.Response(503, text='down')

        backend = self.make_http_backend(handler, audit_log=self.audit)
        reply = complete(backend, build_request(), attempts=3, backoff=0.5, sleep=self.sleeps.append)
        self.assertEqual(reply.finish, Finish.ERROR)
        self.assertEqual(len(read_audit(self.audit_path)), 3)
        self.assertEqual(self.sleeps, [0.5, 1.0])

    def test_transport_error_is_retried(self):
        attempts = []

        def handler(request):
            attempts.append(request)
            if len(attempts) == 1:
                raise httpx.ConnectError('connection refused', request=request)
            return httpx.Response(200, json=self.completion_body('recovered'))

        reply = complete(self.make_http_backend(handler), build_request(), sleep=self.sleeps.append)
        self.assertEqual(reply.content, 'recovered')
        self.assertEqual(len(attempts), 2)

    def test_length_finish_is_reported(self):
        def handler(request):
            return httpx.Response(200, json=self.completion_body('partial answer', 'length'))

        reply = complete(self.make_http_backend(handler), build_request())
        self.assertEqual(reply.finish, Finish.LENGTH)
        self.assertEqual(reply.content, 'partial answer')

    def test_completed_signal_carries_reply(self):
        received = []

        def on_completed(sender, reply, **kwargs):
            received.append(reply)

        chat_completed.connect(on_completed)
        self.addCleanup(chat_completed.disconnect, on_completed)

        def handler(request):
            return httpx.Response(200, json=self.completion_body('ok'))

        complete(self.make_http_backend(handler), build_request())
        self.assertEqual(len(received), 1)
        self.assertEqual(received[0].output_tokens, 3)

    def test_audit_usage_totals(self):
        def handler(request):
            return httpx.Response(200, json=self.completion_body('ok'))

        backend = self.make_http_backend(handler, audit_log=self.audit)
        complete(backend, build_request())
        complete(backend, build_request('again'))
        totals = usage_totals(read_audit(self.audit_path))
        self.assertEqual(totals, {'prompt_tokens': 22, 'output_tokens': 6, 'requests': 2})


class TokenBucketTests(SimpleTestCase):
    def test_waits_when_bucket_is_empty(self):
        now = [0.0]
        sleeps = []

        def fake_sleep(seconds):
            sleeps.append(seconds)
            now[0] += seconds

        bucket = TokenBucket(60, clock=lambda: now[0], sleep=fake_sleep)
        bucket.acquire()
        bucket.acquire()
        self.assertEqual(len(sleeps), 1)
        self.assertAlmostEqual(sleeps[0], 1.0)


class ExtractJsonTests(SimpleTestCase):
    # Replies in the shapes chat models actually produce.
    CORPUS = [
        ('```json\n{"a": 1}\n```', {'a': 1}),
        ('Here you go:\n```json\n{"Standard Answer": "hexokinase"}\n```\nLet me know!', {'Standard Answer': 'hexokinase'}),
        ('```JSON\n{"x": [1, 2]}\n```', {'x': [1, 2]}),
        ('```\n{"plain": true}\n```', {'plain': True}),
        ('Sure. {"CoT": [{"action": "Final Conclusion", "content": "B"}]} Hope this helps.',
         {'CoT': [{'action': 'Final Conclusion', 'content': 'B'}]}),
        ('{"a":1} {"b":2}', {'a': 1}),
        ('Note {not json} then {"ok": "yes"}', {'ok': 'yes'}),
        ('{"text": "a } brace inside", "n": 2}', {'text': 'a } brace inside', 'n': 2}),
        ('{"quote": "he said \\"hi\\" {"}', {'quote': 'he said "hi" {'}),
        ('```python\nprint(1)\n```\n```json\n{"later": 1}\n```', {'later': 1}),
        ('```json\n{broken\n```\n```json\n{"second": 2}\n```', {'second': 2}),
        ('```json\n[1, 2, 3]\n```', [1, 2, 3]),
        ('Result:\n{\n  "NaturalReasoning": "Hmm, wait.\\nSo it is X."\n}\n', {'NaturalReasoning': 'Hmm, wait.\nSo it is X.'}),
        ('{"outer": {"inner": {"deep": 1}}} trailing', {'outer': {'inner': {'deep': 1}}}),
        ('```json \n{"Open-ended Verifiable Question": "Which enzyme?", "Standard Answer": "GLUT4"}\n```',
         {'Open-ended Verifiable Question': 'Which enzyme?', 'Standard Answer': 'GLUT4'}),
    ]

    def test_corpus(self):
        for raw, expected in self.CORPUS:
            with self.subTest(raw=raw):
                self.assertEqual(extract_json(raw), expected)

    def test_offsets_point_at_span(self):
        raw = 'prefix {"a": 1} suffix'
        found = extract_json_span(raw)
        self.assertEqual(raw[found.start:found.end], '{"a": 1}')

    def test_no_candidate_raises_with_raw(self):
        with self.assertRaises(JsonExtractionError) as ctx:
            extract_json('I cannot answer that.')
        self.assertEqual(ctx.exception.raw, 'I cannot answer that.')

    def test_round_trip_through_envelopes(self):
        values = [{'a': [1, 'x', None]}, {'nested': {'k': 1.5, 'b': False}}, {'s': 'line\nbreak'}]
        for value in values:
            body = json.dumps(value)
            for envelope in (f'```json\n{body}\n```', f'```\n{body}\n```', f'text {body} text'):
                self.assertEqual(extract_json(envelope), value)


class PromptTests(SimpleTestCase):
    def test_verifier_prompt_renders_both_fields(self):
        prompt = render_prompt('verifier', Model_Response='It is aspirin.', Ground_true_Answer='Aspirin')
        self.assertIn('<Model Response>\nIt is aspirin.\n</Model Response>', prompt)
        self.assertIn('<Reference Answer>\nAspirin\n</Reference Answer>', prompt)

    def test_missing_value_is_an_error(self):
        with self.assertRaises(PromptError):
            render_prompt('filter_mcq', Question='q', Options='A. x')

    def test_unknown_key_is_an_error(self):
        with self.assertRaises(PromptError):
            render_prompt('generate_response', Question='q', Complex_CoT='c', Answer='a')

    def test_values_are_not_re_expanded(self):
        rendered = render_template('Q: {Question}', {'Question': 'literal {Question} {"a": 1}'})
        self.assertEqual(rendered, 'Q: literal {Question} {"a": 1}')

    def test_reformat_prompt_keeps_schema_braces(self):
        prompt = render_prompt('reformat_mcq', Question='Which enzyme?', Options='A. x\nB. y', Answer='B. y')
        self.assertIn('"Standard Answer": "..."', prompt)
        self.assertIn('Correct Answer: B. y', prompt)

    def test_truncate(self):
        self.assertEqual(truncate('abcdef', 3), 'abc... [3 more chars]')
        self.assertEqual(truncate('abc', 3), 'abc')
