import contextlib
import queue
import threading


class _Failure:
    def __init__(self, exc):
        self.exc = exc


class Channel(queue.Queue):
    """A bounded queue that the consumer iterates until the producer closes it.

    Items flow one way, from a single producer thread to a single consumer.
    """

    def __init__(self, maxsize=0):
        super().__init__(maxsize)
        self._sentinel = object()

    def __iter__(self):
        return self

    def __next__(self):
        if (item := self.get()) is self._sentinel:
            raise StopIteration
        if isinstance(item, _Failure):
            raise item.exc
        return item

    def send(self, item, cancelled, poll=0.1):
        """Put `item`, waiting for room; return `False` if `cancelled` is set first."""
        while not cancelled.is_set():
            try:
                self.put(item, timeout=poll)
            except queue.Full:
                continue
            return True
        return False

    def close(self, cancelled):
        self.send(self._sentinel, cancelled)

    def fail(self, exc, cancelled):
        self.send(_Failure(exc), cancelled)


@contextlib.contextmanager
def open_channel(iterable, maxsize=2):
    """Iterate over `iterable` on a background thread and yield a `Channel` of its items.

    The producer runs at most `maxsize` items ahead. An exception raised by
    `iterable` is re-raised in the consumer at the point it occurred. Leaving
    the context early stops the producer.
    """
    channel = Channel(maxsize)
    cancelled = threading.Event()

    def _produce():
        try:
            for item in iterable:
                if not channel.send(item, cancelled):
                    return
        except Exception as exc:
            channel.fail(exc, cancelled)
        else:
            channel.close(cancelled)

    thread = threading.Thread(target=_produce, name="tnkf-prefetch", daemon=True)
    thread.start()
    try:
        yield channel
    finally:
        cancelled.set()
        thread.join()
