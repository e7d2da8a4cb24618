import logging
import time

from django.conf import settings

from .backends import BackendError, TransientBackendError
from .models import ChatReply
from .signals import chat_completed


logger = logging.getLogger(__name__)


def backoff_delay(attempt, base, ceiling):
    return min(base * (2 ** (attempt - 1)), ceiling)


def complete(backend, request, *, attempts=None, backoff=None, sleep=time.sleep):
    """
    Send one chat request with the retry policy.

    Transport failures, 429 and 5xx are retried with exponential backoff;
    any other failure ends the call at once. The result is never raised:
    a failed call returns a reply with finish=error.
    """
    conf = settings.PIPELINE
    attempts = attempts or conf['RETRY_ATTEMPTS']
    backoff = conf['RETRY_BACKOFF'] if backoff is None else backoff
    request.clean()

    reply = None
    for attempt in range(1, attempts + 1):
        backend.acquire()
        retry = False
        try:
            reply = backend.send(request)
        except TransientBackendError as exc:
            reply = ChatReply.failure(str(exc), status=exc.status)
            retry = attempt < attempts
        except BackendError as exc:
            reply = ChatReply.failure(str(exc), status=exc.status)

        if backend.audit_log is not None:
            backend.audit_log.record(backend, request, reply, attempt)

        if not retry:
            break
        delay = backoff_delay(attempt, backoff, conf['RETRY_BACKOFF_MAX'])
        logger.info('%s: %s, retrying in %.2fs (attempt %d/%d)',
                    request.tag, reply.error, delay, attempt, attempts)
        sleep(delay)

    if not reply.ok:
        logger.warning('%s via %s failed: %s', request.tag, backend, reply.error)
    chat_completed.send(sender=type(backend), backend=backend, request=request, reply=reply)
    return reply
