"""
pimgpt.event: Typed notifications from long-running simulations

A producer declares a notification as a method stub whose parameters are the payload; the
stub's signature is the contract listeners are checked against when they subscribe::

    class Simulator(object):

        @event
        def token_done(self, index, clock_ps):
            '''Called after each token step.'''

    sim.token_done += lambda index, clock_ps: log.info('token %d at %d ps', index, clock_ps)
    with sim.token_done.listening(progress_bar.update):
        sim.run_token(stream)

Firing binds the arguments to the declared signature first, so a producer firing the wrong
payload fails before any listener runs. Listeners are then called positionally, in
subscription order.
"""

import inspect
import logging
import contextlib

log = logging.getLogger(__name__)

__all__ = 'event', 'BoundEvent'


def _payload(func):
    params = list(inspect.signature(func).parameters.values())[1:]
    return inspect.Signature(params)


class event(object):
    """
    Event decorator. The decorated stub supplies the name, docstring and payload signature
    (minus `self`); each instance of the owning class gets its own :class:`BoundEvent`.

    :ivar name:      (str) the stub's name
    :ivar signature: (:class:`inspect.Signature`) the payload listeners receive
    """
    def __init__(self, func):
        self.__doc__ = func.__doc__
        self.name = func.__name__
        self.signature = _payload(func)
        self._key = ' ' + func.__name__

    def __get__(self, obj, cls):
        if obj is None:
            return self
        try:
            return obj.__dict__[self._key]
        except KeyError:
            bound = obj.__dict__[self._key] = BoundEvent(self.name, self.signature)
            return bound

    def __repr__(self):
        return '<event %s%s>' % (self.name, self.signature)


class BoundEvent(object):
    """
    Listeners of one event on one producer instance.

    :raises TypeError: on subscribing a listener that can't take the payload positionally, or
                       on firing with arguments that don't fit the declared signature
    """

    def __init__(self, name, signature):
        self.name = name
        self.signature = signature
        self._listeners = []

    def _check_listener(self, fn):
        if not callable(fn):
            raise TypeError('listener for %s is not callable: %r' % (self.name, fn))
        try:
            accepts = inspect.signature(fn)
        except (TypeError, ValueError):
            return  # builtins without introspectable signatures
        try:
            accepts.bind(*self.signature.parameters)
        except TypeError:
            raise TypeError('listener %r for %s can\'t take %s' % (fn, self.name, self.signature))

    def __iadd__(self, fn):
        self._check_listener(fn)
        self._listeners.append(fn)
        return self

    def __isub__(self, fn):
        self._listeners.remove(fn)
        return self

    @contextlib.contextmanager
    def listening(self, fn):
        """Subscribe `fn` for the duration of a ``with`` block; None subscribes nothing."""
        if fn is None:
            yield self
            return
        self += fn
        try:
            yield self
        finally:
            self -= fn

    def __len__(self):
        return len(self._listeners)

    def __bool__(self):
        return True

    def __call__(self, *args, **kwargs):
        bound = self.signature.bind(*args, **kwargs)
        bound.apply_defaults()
        for fn in list(self._listeners):
            fn(*bound.args)

    def __repr__(self):
        return '<%s %s%s, %d listeners>' % (self.__class__.__name__, self.name, self.signature, len(self))
