"""Run the link stack against real devices (or fakes that look like them).

The loop is the simulator's loop with a clock that can actually sleep:
poll the movement source once per poll interval, feed the FSMs, and let
them drive the emitter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .link import LinkConfig, LinkReceiver, LinkSender, State
from .modem import ModemConfig, PollSample

log = logging.getLogger(__name__)


@dataclass
class LiveResult:
    role: str
    delivered: bool
    payload: bytes
    attempts: int
    acks: int
    duration_ms: int
    failure: str | None = None


def _moved(source) -> int:
    return 1 if source.poll() else 0


class ScheduledEmitter:
    """Queue future light commands and issue each once its time has come.

    The link layer schedules a whole frame ahead; a real device has to be
    toggled at the moment itself.
    """

    def __init__(self, inner):
        self.inner = inner
        self.handle = inner.handle
        self.queue: list[tuple[int, object]] = []

    def set_light(self, state, at: int) -> int:
        self.queue.append((at, state))
        self.queue.sort(key=lambda c: c[0])
        return at + self.handle.latency(state)

    def flush(self, now: int) -> int:
        issued = 0
        while self.queue and self.queue[0][0] <= now:
            at, state = self.queue.pop(0)
            self.inner.set_light(state, at)
            issued += 1
        return issued

    def drain(self, clock) -> None:
        while self.queue:
            clock.sleep_until(self.queue[0][0])
            self.flush(clock.now)


def receive(source, emitter, modem_cfg: ModemConfig, clock, link_cfg: LinkConfig | None = None,
            timeout_ms: int = 600_000) -> LiveResult:
    """Listen until one session has delivered data and then gone idle, or until timeout."""
    link_cfg = link_cfg or LinkConfig()
    emitter = ScheduledEmitter(emitter) if emitter is not None else None
    rx = LinkReceiver(modem_cfg, link_cfg, emitter)
    poll = modem_cfg.poll_interval_ms
    t0 = clock.now - clock.now % poll
    t = t0
    while t - t0 < timeout_ms:
        if emitter is not None:
            emitter.flush(t)
        clock.sleep_until(t + poll)
        rx.on_sample(PollSample(t, _moved(source)))
        t += poll
        if rx.delivered and rx.state == State.CLOSED:
            break
    if emitter is not None:
        emitter.drain(clock)
    payload = b"".join(rx.delivered)
    log.info("received %d octets in %d frames", len(payload), len(rx.frames))
    return LiveResult("recv", bool(rx.delivered), payload, len(rx.frames), rx.acks_sent, t - t0,
                      None if rx.delivered else "timeout")


def send(payload: bytes, emitter, source, modem_cfg: ModemConfig, clock,
         link_cfg: LinkConfig | None = None) -> LiveResult:
    """Transmit ``payload``; ``source`` is this host's own photocell, or None for one-way."""
    link_cfg = link_cfg or LinkConfig()
    emitter = ScheduledEmitter(emitter)
    tx = LinkSender(modem_cfg, link_cfg, emitter, ack_path=source is not None)
    poll = modem_cfg.poll_interval_ms
    t0 = clock.now - clock.now % poll + poll
    tx.start(payload, t0)
    t = t0
    while not tx.done:
        emitter.flush(t)
        clock.sleep_until(t + poll)
        ack = PollSample(t, _moved(source)) if source is not None else None
        t += poll
        tx.on_tick(t, ack)
    emitter.drain(clock)
    delivered = tx.failure is None
    if not delivered:
        log.warning("send failed: %s", tx.failure)
    return LiveResult("send", delivered, bytes(payload), len(tx.attempts),
                      sum(a.acked for a in tx.attempts), t - t0, tx.failure)

