"""Actors, timers, observer/monitor recorders and the run loop.

A :class:`Simulation` is one world state: the clock, the actors, the
pending delayed messages, one :class:`Observer` and one :class:`Monitor`.
Actors own their timers; the engine keeps a lazily-invalidated heap index of
armed timers so the next enabled time is the minimum over pending messages
and armed timers without scanning every actor.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable

from .simcore import (
    INFINITY,
    Bernoulli,
    ConfigurationError,
    Constant,
    Distribution,
    EventQueue,
    RandomStream,
    SimulationError,
)

log = logging.getLogger(__name__)


@dataclass(slots=True)
class Message:
    """A message hop from ``sender`` to ``receiver``.

    ``src``/``dst`` are the end-to-end endpoints; relays (the router, the
    public servers) rewrite ``sender``/``receiver`` and keep them.
    """

    kind: str
    sender: str
    receiver: str
    src: str = ""
    dst: str = ""
    size: int = 0
    payload: dict = field(default_factory=dict)

    def forward(self, sender: str, receiver: str, **changes) -> "Message":
        m = Message(self.kind, sender, receiver, self.src, self.dst, self.size, dict(self.payload))
        for k, v in changes.items():
            setattr(m, k, v)
        return m


@dataclass(slots=True)
class Timer:
    """Timer stored as an absolute due time; ``due == INFINITY`` is disarmed."""

    due: float = INFINITY
    period: float = 0.0
    data: Any = None
    seq: int = -1

    def remaining(self, clock: float) -> float:
        return self.due - clock

    @property
    def armed(self) -> bool:
        return self.due != INFINITY


class Context:
    """What a rule body may touch: the clock, the actor's stream, an outbox
    and the monitor."""

    __slots__ = ("clock", "stream", "tasks", "monitor")

    def __init__(self, clock: float, stream: RandomStream, monitor: "Monitor | None" = None):
        self.clock = clock
        self.stream = stream
        self.tasks: list[Message] = []
        self.monitor = monitor

    def send(self, msg: Message) -> None:
        self.tasks.append(msg)

    def record(self, tag: str, **payload) -> None:
        if self.monitor is not None:
            self.monitor.record(self.clock, tag, payload)


class Actor:
    """Base actor.

    Subclasses map message kinds to handler method names in
    ``message_rules`` (``"*"`` matches any kind) and implement
    :meth:`on_timer`. Handlers mutate only ``self`` and emit messages via
    the context.
    """

    actor_class = "Actor"
    message_rules: dict[str, str] = {}

    def __init__(self, name: str):
        self.name = name
        self.timers: dict[Any, Timer] = {}
        self._sim: Simulation | None = None

    # timers
    def arm(self, key: Any, due: float, period: float = 0.0, data: Any = None) -> Timer:
        t = self.timers.get(key)
        if t is None:
            t = self.timers[key] = Timer(due, period, data)
        else:
            t.due, t.period, t.data = due, period, data
        if self._sim is not None and due != INFINITY:
            self._sim._index_timer(self, key, t)
        return t

    def disarm(self, key: Any) -> None:
        t = self.timers.get(key)
        if t is not None:
            t.due = INFINITY

    # behaviour
    def start(self, ctx: Context) -> None:
        """Called once at t=0 to arm initial timers."""

    def handle_message(self, msg: Message, ctx: Context) -> bool:
        name = self.message_rules.get(msg.kind) or self.message_rules.get("*")
        if name is None:
            return False
        getattr(self, name)(msg, ctx)
        return True

    def on_timer(self, key: Any, ctx: Context) -> None:
        raise ConfigurationError(f"actor {self.name!r} has no rule for expired timer {key!r}")

    def attributes(self) -> dict[str, Any]:
        return {k: v for k, v in vars(self).items() if not k.startswith("_")}

    def __repr__(self):
        return f"<{self.name} : {self.actor_class}>"


def fire_message_rule(actor: Actor, msg: Message, clock: float, stream: RandomStream):
    """Apply ``actor``'s rule for ``msg`` outside an engine.

    Returns ``(actor, tasks)``; an unmatched message leaves the actor
    unchanged and yields no tasks.
    """
    ctx = Context(clock, stream)
    if not actor.handle_message(msg, ctx):
        log.debug("dropping unmatched %s at %s", msg.kind, actor.name)
    return actor, ctx.tasks


def fire_timer_rule(actor: Actor, clock: float, stream: RandomStream):
    """Fire every timer of ``actor`` that is due at ``clock``."""
    due = [k for k, t in actor.timers.items() if t.due <= clock]
    if not due:
        raise SimulationError(f"no timer of {actor.name!r} is due at {clock}")
    ctx = Context(clock, stream)
    for key in due:
        actor.timers[key].due = INFINITY
        actor.on_timer(key, ctx)
    return actor, ctx.tasks


class Observer:
    """Adversary-side recorder: ``sent`` holds ``(time, message)`` pairs and
    ``summary`` is written once, by the final hook."""

    def __init__(self):
        self.sent: list[tuple[float, Any]] = []
        self.summary: dict[str, Any] = {}
        self._finalized = False

    def add(self, time: float, item: Any) -> None:
        if self.sent and time < self.sent[-1][0]:
            raise SimulationError("observer entries must be time ordered")
        self.sent.append((time, item))

    def finalize(self, **summary) -> None:
        if self._finalized:
            raise SimulationError("observer summary already written")
        self.summary.update(summary)
        self._finalized = True


class Monitor:
    """Append-only log of ``(time, tag, payload)`` performance events."""

    def __init__(self):
        self.events: list[tuple[float, str, dict]] = []

    def record(self, time: float, tag: str, payload: dict | None = None) -> None:
        if self.events and time < self.events[-1][0]:
            raise SimulationError("monitor events must be time ordered")
        self.events.append((time, tag, dict(payload or {})))

    def first(self, tag: str) -> tuple[float, dict] | None:
        for t, g, p in self.events:
            if g == tag:
                return t, p
        return None

    def all(self, tag: str) -> list[tuple[float, dict]]:
        return [(t, p) for t, g, p in self.events if g == tag]


class Hooks:
    """Lifecycle callbacks. The defaults leave the configuration unchanged."""

    def on_send(self, sim: "Simulation", time: float, msg: Message) -> None:
        pass

    def on_arrival(self, sim: "Simulation", time: float, msg: Message) -> None:
        pass

    def on_final(self, sim: "Simulation") -> None:
        pass


@dataclass
class Link:
    """Directed link: each message is dropped with probability ``loss``,
    otherwise delayed by a draw from ``delay``."""

    src: str
    dst: str
    delay: Distribution = field(default_factory=lambda: Constant(0.0))
    loss: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.loss <= 1.0):
            raise ConfigurationError(f"link {self.src}->{self.dst} loss must lie in [0, 1]", ["loss"])
        self._loss = Bernoulli(self.loss)


_ZERO_LINK = Link("*", "*")


@dataclass
class RunStats:
    scheduled: int = 0
    delivered: int = 0
    dropped: int = 0
    unhandled: int = 0
    timer_firings: int = 0


class Simulation:
    """One seeded world: build it with :meth:`add_actor`/:meth:`add_link`,
    then :meth:`run`.

    Every actor and link gets its own :class:`RandomStream` derived from
    ``(root_seed, "actor"|"link", name...)``, so adding an actor does not
    perturb anyone else's samples.
    """

    def __init__(self, root_seed: int, hooks: Hooks | None = None):
        self.root_seed = int(root_seed)
        self.clock = 0.0
        self.actors: dict[str, Actor] = {}
        self.streams: dict[str, RandomStream] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self._link_streams: dict[tuple[str, str], RandomStream] = {}
        self.queue = EventQueue()
        self._timers: list[tuple[float, int, str, Any]] = []
        self.observer = Observer()
        self.monitor = Monitor()
        self.hooks = hooks or Hooks()
        self.stats = RunStats()
        self.terminated = False
        self.end_time = 0.0
        self._started = False

    # construction
    def add_actor(self, actor: Actor) -> Actor:
        if actor.name in self.actors:
            raise ConfigurationError(f"duplicate actor id {actor.name!r}", ["name"])
        actor._sim = self
        self.actors[actor.name] = actor
        self.streams[actor.name] = RandomStream(self.root_seed, ("actor", actor.name))
        return actor

    def add_link(self, link: Link, bidirectional: bool = False) -> None:
        pairs = [(link.src, link.dst)]
        if bidirectional:
            pairs.append((link.dst, link.src))
        for a, b in pairs:
            lk = link if (a, b) == (link.src, link.dst) else Link(a, b, link.delay, link.loss)
            self.links[(a, b)] = lk
            self._link_streams[(a, b)] = RandomStream(self.root_seed, ("link", a, b))

    def stream_for(self, name: str) -> RandomStream:
        return self.streams[name]

    # engine internals
    def _index_timer(self, actor: Actor, key: Any, timer: Timer) -> None:
        if timer.due < self.clock:
            raise SimulationError(f"timer {key!r} of {actor.name} armed in the past ({timer.due} < {self.clock})")
        timer.seq = self.queue._seq
        self.queue._seq += 1
        heapq.heappush(self._timers, (timer.due, timer.seq, actor.name, key))

    def _peek_timer(self) -> tuple[float, int]:
        heap = self._timers
        while heap:
            due, seq, name, key = heap[0]
            t = self.actors[name].timers.get(key)
            if t is not None and t.seq == seq and t.due == due:
                return due, seq
            heapq.heappop(heap)  # stale: rearmed or disarmed since indexing
        return INFINITY, -1

    def _emit(self, msgs: Iterable[Message]) -> None:
        for msg in msgs:
            self.hooks.on_send(self, self.clock, msg)
            self.stats.scheduled += 1
            key = (msg.sender, msg.receiver)
            link = self.links.get(key, _ZERO_LINK)
            stream = self._link_streams.get(key)
            if stream is None:
                self.queue.push(self.clock, msg, self.clock)
                continue
            if link._loss.sample(stream):
                self.stats.dropped += 1
                continue
            self.queue.push(self.clock + link.delay.sample(stream), msg, self.clock)

    def _context(self, name: str) -> Context:
        return Context(self.clock, self.streams[name], self.monitor)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for name, actor in self.actors.items():
            ctx = self._context(name)
            actor.start(ctx)
            self._emit(ctx.tasks)

    def next_time(self) -> float:
        return min(self.queue.peek_time(), self._peek_timer()[0])

    def advance(self, until: float = INFINITY) -> bool:
        """Move the clock to the next enabled time.

        Returns ``False`` (after firing the final hook) when nothing is
        enabled at or before ``until``.
        """
        self.start()
        t = self.next_time()
        if t == INFINITY or t > until:
            self._finish(until)
            return False
        if t < self.clock:
            raise SimulationError("clock would run backward")
        self.clock = t
        return True

    def _finish(self, until: float) -> None:
        if self.terminated:
            return
        self.terminated = True
        self.end_time = until if until != INFINITY else self.clock
        self.hooks.on_final(self)

    def step(self, until: float = INFINITY) -> bool:
        """Fire the single earliest event (FIFO among equal times)."""
        if not self.advance(until):
            return False
        qt = self.queue.peek_time()
        tt, tseq = self._peek_timer()
        if qt < tt or (qt == tt and self.queue._heap[0].seq < tseq):
            _, msg = self.queue.pop()
            self._deliver(msg)
        else:
            _, _, name, key = heapq.heappop(self._timers)
            actor = self.actors[name]
            actor.timers[key].due = INFINITY  # consumed; the rule may rearm
            ctx = self._context(name)
            self.stats.timer_firings += 1
            actor.on_timer(key, ctx)
            self._emit(ctx.tasks)
        return True

    def _deliver(self, msg: Message) -> None:
        self.stats.delivered += 1
        self.hooks.on_arrival(self, self.clock, msg)
        actor = self.actors.get(msg.receiver)
        if actor is None:
            self.stats.unhandled += 1
            log.debug("no actor %r for %s; dropped", msg.receiver, msg.kind)
            return
        ctx = self._context(actor.name)
        if not actor.handle_message(msg, ctx):
            self.stats.unhandled += 1
            log.debug("%s has no rule for %s; dropped", actor.name, msg.kind)
        self._emit(ctx.tasks)

    def run(self, until: float = INFINITY, max_events: int | None = None) -> "Simulation":
        n = 0
        while self.step(until):
            n += 1
            if max_events is not None and n >= max_events:
                raise SimulationError(f"event budget {max_events} exhausted at t={self.clock}")
        return self

    @property
    def pending(self) -> int:
        return len(self.queue)

