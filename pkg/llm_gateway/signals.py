from django.dispatch import Signal


# Sent once per finished complete() call with backend, request and reply.
chat_completed = Signal()
