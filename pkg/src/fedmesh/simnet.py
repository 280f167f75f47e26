"""Seeded in-process network simulator with a virtual clock.

Datagrams between named endpoints are delayed by a uniform latency draw,
dropped with a configured probability, and blocked during scheduled
partition windows.  All deliveries and timers run through one event queue
ordered by (virtual time, insertion sequence), so a run is a pure function
of the seed.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConfigError


@dataclass(frozen=True)
class SimNetConfig:
    latency_ms: tuple[float, float] = (1.0, 1.0)
    drop_prob: float = 0.0
    seed: int = 0
    partitions: tuple[tuple[str, str, float, float], ...] = field(default=())

    def __post_init__(self):
        lo, hi = self.latency_ms
        if lo < 0 or lo > hi:
            raise ConfigError("latency_ms must satisfy 0 <= min <= max")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ConfigError("drop_prob must be in [0, 1)")


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    fn: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)


class SimEndpoint:
    """A named attachment point on the simulated fabric."""

    def __init__(self, net: "SimNetwork", name: str):
        self._net = net
        self.name = name
        self._handler: Callable[[bytes], None] | None = None

    def send(self, dst: str, data: bytes) -> None:
        self._net._send(self.name, dst, data)

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> object:
        return self._net.schedule(delay_ms, fn)

    def cancel(self, handle: object) -> None:
        self._net.cancel(handle)

    def now_ms(self) -> float:
        return self._net.now_ms

    def set_receive_handler(self, fn: Callable[[bytes], None]) -> None:
        self._handler = fn

    def _deliver(self, data: bytes) -> None:
        if self._handler is not None:
            self._handler(data)


class SimNetwork:
    def __init__(self, config: SimNetConfig):
        self.config = config
        self.now_ms = 0.0
        self._rng = random.Random(config.seed)
        self._queue: list[_Event] = []
        self._seq = 0
        self._endpoints: dict[str, SimEndpoint] = {}
        self.delivery_trace: list[tuple[float, str, str, int]] = []

    def endpoint(self, name: str) -> SimEndpoint:
        if name in self._endpoints:
            raise ConfigError(f"endpoint {name!r} already registered")
        ep = SimEndpoint(self, name)
        self._endpoints[name] = ep
        return ep

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> _Event:
        if delay_ms < 0:
            raise ValueError("cannot schedule into the past")
        event = _Event(self.now_ms + delay_ms, self._seq, fn)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def cancel(self, handle: object) -> None:
        if isinstance(handle, _Event):
            handle.cancelled = True

    def _partitioned(self, src: str, dst: str) -> bool:
        for a, b, start, end in self.config.partitions:
            if (a, b) == (src, dst) and start <= self.now_ms < end:
                return True
        return False

    def _send(self, src: str, dst: str, data: bytes) -> None:
        if dst not in self._endpoints:
            raise KeyError(f"unknown endpoint {dst!r}")
        if self._partitioned(src, dst):
            return
        if self.config.drop_prob > 0 and self._rng.random() < self.config.drop_prob:
            return
        lo, hi = self.config.latency_ms
        latency = lo if lo == hi else self._rng.uniform(lo, hi)
        target = self._endpoints[dst]
        size = len(data)

        def deliver():
            self.delivery_trace.append((self.now_ms, src, dst, size))
            target._deliver(data)

        self.schedule(latency, deliver)

    def step(self) -> bool:
        """Run the earliest pending event; False when the queue is empty."""
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now_ms = event.time
            event.fn()
            return True
        return False

    def run(
        self,
        until: Callable[[], bool] | None = None,
        max_virtual_ms: float | None = None,
        max_events: int = 10_000_000,
    ) -> None:
        """Drain events until the predicate holds, the clock cap, or idle."""
        for _ in range(max_events):
            if until is not None and until():
                return
            if max_virtual_ms is not None and self._next_time() > max_virtual_ms:
                return
            if not self.step():
                return
        raise RuntimeError("simulator exceeded max_events; likely a timer loop")

    def _next_time(self) -> float:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else float("inf")
