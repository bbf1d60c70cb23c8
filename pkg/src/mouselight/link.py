"""Connection lifecycle and stop-and-wait reliability.

Every frame opens with the preamble, so finding a preamble is what moves a
receiver out of Idle (or Closed) into Connected. After a checksum-valid
frame the receiver blinks an ACK back (ON, OFF, ON, OFF, one bit period
each) if it has an emitter. The sender waits ``ack_window_bits`` after the
frame for the ACK pattern and otherwise retransmits, up to ``max_retries``
times. Frames alternate a 1-bit sequence flag so a retransmitted copy of an
already delivered frame is acknowledged again but not handed up twice.

A receiver that sees no movement for ``idle_timeout_bits`` bit periods
while between frames closes the connection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import codec
from .errors import DeviceError, MouselightError
from .modem import LightCommand, ModemConfig, PatternSearch, PollSample, modulate
from .phy import EmitterHandle, LightState


class LinkError(MouselightError):
    pass


class IllegalTransition(LinkError):
    pass


class ConnectionTimeout(LinkError):
    pass


class EmitterUnavailable(LinkError):
    exit_code = 3


class LinkFailed(LinkError):
    RETRIES_EXHAUSTED = "retries_exhausted"
    CONNECTION_LOST = "connection_lost"
    NOT_RECEIVED = "not_received"

    def __init__(self, reason: str, result: "TransferResult | None" = None):
        super().__init__(reason)
        self.reason = reason
        self.result = result


class State(enum.Enum):
    IDLE = "Idle"
    CONNECTING = "Connecting"
    CONNECTED = "Connected"
    AWAITING_ACK = "AwaitingAck"
    CLOSING = "Closing"
    CLOSED = "Closed"


_ALLOWED = {
    State.IDLE: {State.CONNECTING, State.CLOSING},
    State.CONNECTING: {State.CONNECTED, State.CLOSING},
    State.CONNECTED: {State.AWAITING_ACK, State.CLOSING},
    State.AWAITING_ACK: {State.CONNECTED, State.CLOSING},
    State.CLOSING: {State.CLOSED},
    State.CLOSED: {State.CONNECTING},
}


@dataclass(frozen=True)
class LinkConfig:
    idle_timeout_bits: int = 5
    max_retries: int = 3
    ack_pattern: tuple[int, ...] = (1, 0, 1, 0)
    ack_window_bits: int = 6
    inter_frame_gap_bits: int = 2
    arq: bool = True

    def __post_init__(self):
        if self.idle_timeout_bits < 1:
            raise ValueError("idle_timeout_bits must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.ack_window_bits <= len(self.ack_pattern):
            raise ValueError("ACK window must be longer than the ACK pattern")

    @property
    def max_chunk(self) -> int:
        return codec.MAX_ARQ_PAYLOAD if self.arq else codec.MAX_PAYLOAD


@dataclass
class LinkState:
    state: State = State.IDLE
    connection_time: int | None = None
    last_activity: int | None = None
    history: list[tuple[int, State, State]] = field(default_factory=list)

    def to(self, new: State, at: int) -> None:
        if new not in _ALLOWED[self.state]:
            raise IllegalTransition(f"{self.state.value} -> {new.value}")
        self.history.append((at, self.state, new))
        self.state = new
        if new == State.CONNECTED and self.connection_time is None:
            self.connection_time = at
            self.last_activity = at


class Emitter(Protocol):
    handle: EmitterHandle

    def set_light(self, state: LightState, at: int) -> int: ...


def drive(emitter: Emitter, commands: Sequence[LightCommand]) -> list[int]:
    """Issue ``commands`` early by each state's latency so they take effect on time.

    ``commands`` carry the times the light should actually change.
    """
    issued = []
    last = None
    for cmd in commands:
        at = cmd.at - emitter.handle.latency(cmd.state)
        if last is not None and at < last:
            raise ValueError(f"latency compensation reorders commands at {cmd.at} ms")
        emitter.set_light(cmd.state, at)
        issued.append(at)
        last = at
    return issued


def split_payload(payload: bytes, chunk: int) -> list[bytes]:
    if not payload:
        return [b""]
    return [payload[i:i + chunk] for i in range(0, len(payload), chunk)]


@dataclass
class ReceivedFrame:
    start: int
    end: int
    bits: list[int]
    payload: bytes | None
    seq: int | None
    error: str | None = None
    duplicate: bool = False
    acked: bool = False


class LinkReceiver:
    """Receive-side FSM fed one poll sample at a time."""

    def __init__(self, modem_cfg: ModemConfig, link_cfg: LinkConfig | None = None,
                 emitter: Emitter | None = None):
        self.modem_cfg = modem_cfg
        self.cfg = link_cfg or LinkConfig()
        self.emitter = emitter
        self.link = LinkState()
        self.spb = modem_cfg.samples_per_bit
        self.poll = modem_cfg.poll_interval_ms
        self.search = PatternSearch(modem_cfg, codec.PREAMBLE_BITS)
        self.origin: int | None = None
        self.index = 0
        self._frame: list[int] | None = None
        self._frame_start = 0
        self._needed = 0
        self.last_seq: int | None = None
        self.busy_until = 0
        self.frames: list[ReceivedFrame] = []
        self.delivered: list[bytes] = []
        self.acks_sent = 0
        self.ack_times: list[int] = []

    @property
    def state(self) -> State:
        return self.link.state

    @property
    def in_frame(self) -> bool:
        return self._frame is not None

    @property
    def quiet(self) -> bool:
        return self._frame is None and self.search.candidate is None

    def state_key(self) -> tuple:
        """Hashable snapshot of everything that steers future transitions."""
        return (self.link.state, self.search.state_key())

    def _time_of(self, index: int) -> int:
        return self.origin + index * self.poll

    def on_sample(self, s: PollSample) -> None:
        if self.origin is None:
            self.origin = s.at
        elif s.at != self._time_of(self.index):
            raise ValueError(f"sample at {s.at} ms breaks the {self.poll} ms grid")
        moved = 1 if s.moved else 0
        now = s.at + self.poll
        self.index += 1

        if self._frame is not None:
            self._frame.append(moved)
            self._advance_frame(now)
            return

        found = self.search.push(moved)
        if self.search.candidate is not None and self.state in (State.IDLE, State.CLOSED):
            self.link.to(State.CONNECTING, now)
        if found is not None:
            self._begin_frame(found, now)
            return

        if self.state == State.CONNECTED:
            if moved:
                self.link.last_activity = now
            quiet_since = max(self.link.last_activity, self.busy_until)
            if now - quiet_since >= self.cfg.idle_timeout_bits * self.modem_cfg.bit_period_ms:
                self.close_connection(now)

    def _begin_frame(self, offset: int, now: int) -> None:
        # the search buffer holds everything from its base onwards
        tail = list(self.search.buf)[offset - self.search.base:]
        self._frame_start = self._time_of(offset)
        if self.state == State.CONNECTING:
            self.link.connection_time = None
            self.link.to(State.CONNECTED, self._frame_start + self.search.span * self.poll)
        self.link.last_activity = now
        self._frame = []
        self._needed = codec.HEADER_BITS * self.spb
        self._frame.extend(tail)
        self._advance_frame(now)

    def _advance_frame(self, now: int) -> None:
        frame = self._frame
        if len(frame) < self._needed:
            return
        if self._needed == codec.HEADER_BITS * self.spb:
            header = self._bits(frame[:self._needed])
            length_octet = codec.bits_to_bytes(header[8:16])[0]
            self._needed = codec.frame_bit_length(length_octet, self.cfg.arq) * self.spb
            if len(frame) < self._needed:
                return
        self._finish_frame(frame[:self._needed], now)
        leftover = frame[self._needed:]
        self._frame = None
        self.search.reset(self.index - len(leftover))
        for m in leftover:
            found = self.search.push(m)
            if found is not None:
                self._begin_frame(found, now)
                return

    def _bits(self, moved: Sequence[int]) -> list[int]:
        arr = np.asarray(moved, dtype=np.uint8)
        means = arr.reshape(-1, self.spb).mean(axis=1)
        return [int(m >= self.modem_cfg.decision_threshold) for m in means]

    def _finish_frame(self, moved: Sequence[int], now: int) -> None:
        bits = self._bits(moved)
        end = self._frame_start + len(moved) * self.poll
        rec = ReceivedFrame(self._frame_start, end, bits, None, None)
        self.frames.append(rec)
        self.link.last_activity = now
        try:
            frame, _ = codec.read_frame(bits, self.cfg.arq)
        except codec.CodecError as exc:
            rec.error = exc.kind
            return
        rec.payload, rec.seq = frame.payload, frame.seq
        if self.cfg.arq and frame.seq == self.last_seq:
            rec.duplicate = True
        else:
            self.last_seq = frame.seq
            self.delivered.append(frame.payload)
        if self.emitter is not None:
            self.send_acknowledgement(now)
            rec.acked = True

    def send_acknowledgement(self, now: int) -> int:
        """Blink the ACK pattern starting at ``now``; returns the time of the last command."""
        if self.emitter is None:
            raise EmitterUnavailable("receiver has no emitter to acknowledge with")
        if self.state != State.CONNECTED:
            raise IllegalTransition(f"cannot acknowledge while {self.state.value}")
        start = max(now, self.busy_until) + self.emitter.handle.on_latency_ms
        commands = modulate(self.cfg.ack_pattern, self.modem_cfg, start)
        drive(self.emitter, commands)
        self.busy_until = start + len(self.cfg.ack_pattern) * self.modem_cfg.bit_period_ms
        self.acks_sent += 1
        self.ack_times.append(start)
        return commands[-1].at

    def establish_connection(self, samples: Sequence[PollSample], window: int | None = None) -> int:
        """Consume samples until a preamble connects; returns the connection time.

        ``window`` bounds how many samples may be read before giving up.
        """
        if self.state not in (State.IDLE, State.CONNECTING, State.CLOSED):
            raise IllegalTransition(f"already {self.state.value}")
        for n, s in enumerate(samples):
            if window is not None and n >= window:
                break
            self.on_sample(s)
            if self.state == State.CONNECTED:
                return self.link.connection_time
        raise ConnectionTimeout(f"no preamble within {window if window is not None else len(samples)} samples")

    def close_connection(self, now: int) -> None:
        if self.state == State.CLOSED:
            raise IllegalTransition("connection already closed")
        self.link.to(State.CLOSING, now)
        self.link.to(State.CLOSED, now)
        self.link.connection_time = None


@dataclass
class Attempt:
    index: int
    chunk: int
    seq: int | None
    start: int
    end: int
    bits: list[int]
    acked: bool = False
    ack_at: int | None = None


class LinkSender:
    """Send-side FSM: frames out, ACKs in (when a return path exists)."""

    def __init__(self, modem_cfg: ModemConfig, link_cfg: LinkConfig | None = None,
                 emitter: Emitter | None = None, ack_path: bool = True):
        if emitter is None:
            raise EmitterUnavailable("sender needs an emitter")
        self.modem_cfg = modem_cfg
        self.cfg = link_cfg or LinkConfig()
        self.emitter = emitter
        self.ack_path = ack_path
        self.link = LinkState()
        self.bp = modem_cfg.bit_period_ms
        self.chunks: list[bytes] = []
        self.chunk = 0
        self.seq = 0
        self.tries = 0
        self.attempts: list[Attempt] = []
        self.ack_search: PatternSearch | None = None
        self.done_at: int | None = None
        self.failure: str | None = None
        self.on_attempt = None

    @property
    def state(self) -> State:
        return self.link.state

    @property
    def done(self) -> bool:
        return self.done_at is not None

    @property
    def current(self) -> Attempt | None:
        return self.attempts[-1] if self.attempts else None

    def start(self, payload: bytes, now: int) -> None:
        self.chunks = split_payload(bytes(payload), self.cfg.max_chunk)
        self.chunk = self.tries = 0
        self.done_at = self.failure = None
        if self.state == State.CLOSED:
            self.link = LinkState(history=self.link.history)
        self.link.to(State.CONNECTING, now)
        self._send(now)

    def _send(self, now: int) -> None:
        seq = self.seq if self.cfg.arq else None
        bits = codec.encode_payload(self.chunks[self.chunk], seq)
        start = now + self.emitter.handle.on_latency_ms
        try:
            drive(self.emitter, modulate(bits, self.modem_cfg, start))
        except (DeviceError, ValueError) as exc:
            self._finish(now, LinkFailed.CONNECTION_LOST)
            raise LinkFailed(LinkFailed.CONNECTION_LOST) from exc
        attempt = Attempt(len(self.attempts), self.chunk, seq, start, start + len(bits) * self.bp, bits)
        self.attempts.append(attempt)
        self.tries += 1
        self.ack_search = None
        if self.on_attempt is not None:
            self.on_attempt(attempt)

    def _finish(self, now: int, failure: str | None = None) -> None:
        self.failure = failure
        self.done_at = now
        self.link.to(State.CLOSING, now)
        self.link.to(State.CLOSED, now)

    def _next_chunk(self, now: int) -> None:
        self.chunk += 1
        self.seq ^= 1
        self.tries = 0
        if self.chunk == len(self.chunks):
            self._finish(now)
        else:
            self._send(now)

    def on_tick(self, now: int, ack_sample: PollSample | None = None) -> None:
        """Advance to ``now``; ``ack_sample`` is the return-path poll that just closed."""
        if self.done:
            return
        att = self.current
        if self.state == State.CONNECTING and now >= att.start + len(codec.PREAMBLE_BITS) * self.bp:
            self.link.to(State.CONNECTED, att.start + len(codec.PREAMBLE_BITS) * self.bp)
        if now < att.end:
            return
        if not self.ack_path:
            if self.state == State.CONNECTED and now >= att.end + self.cfg.inter_frame_gap_bits * self.bp:
                self._next_chunk(now)
            return
        if self.state == State.CONNECTED:
            self.link.to(State.AWAITING_ACK, att.end)
            self.ack_search = PatternSearch(self.modem_cfg, self.cfg.ack_pattern)
        found = None
        if ack_sample is not None and ack_sample.at >= att.end:
            found = self.ack_search.push(ack_sample.moved)
        deadline = att.end + self.cfg.ack_window_bits * self.bp
        if found is None and now >= deadline:
            found = self.ack_search.finish()
        if found is not None:
            att.acked, att.ack_at = True, now
            self.link.to(State.CONNECTED, now)
            self._next_chunk(now)
        elif now >= deadline:
            if self.tries > self.cfg.max_retries:
                self._finish(now, LinkFailed.RETRIES_EXHAUSTED)
                return
            self.link.to(State.CONNECTED, now)
            self._send(now)


class Path(Protocol):
    """One direction of a channel: an emitter on one side, a sensor on the other."""

    handle: EmitterHandle

    def set_light(self, state: LightState, at: int) -> int: ...

    def poll(self, t: int) -> int: ...


class Channel(Protocol):
    forward: Path
    reverse: Path | None


@dataclass
class TransferResult:
    delivered: bool
    sent: bytes
    received: bytes
    attempts: list[Attempt]
    frames: list[ReceivedFrame]
    acks_sent: int
    ack_times: list[int]
    start: int
    end: int
    failure: str | None = None

    @property
    def retries(self) -> int:
        return len(self.attempts) - len({a.chunk for a in self.attempts})

    @property
    def retries_per_frame(self) -> list[int]:
        counts: dict[int, int] = {}
        for a in self.attempts:
            counts[a.chunk] = counts.get(a.chunk, -1) + 1
        return [counts[k] for k in sorted(counts)]


def transfer(payload: bytes, channel: Channel, modem_cfg: ModemConfig,
             link_cfg: LinkConfig | None = None, start: int = 0,
             sender: LinkSender | None = None, receiver: LinkReceiver | None = None,
             on_attempt=None) -> TransferResult:
    """Move ``payload`` across ``channel`` and return what happened.

    Raises ``LinkFailed`` (with the result attached) when the payload was not
    delivered.
    """
    link_cfg = link_cfg or LinkConfig()
    poll = modem_cfg.poll_interval_ms
    if start % poll:
        raise ValueError("transfer must start on the poll grid")
    bidirectional = channel.reverse is not None
    receiver = receiver or LinkReceiver(modem_cfg, link_cfg, channel.reverse)
    sender = sender or LinkSender(modem_cfg, link_cfg, channel.forward, ack_path=bidirectional)
    sender.on_attempt = on_attempt
    first_attempt = len(sender.attempts)
    first_frame = len(receiver.frames)
    first_delivery = len(receiver.delivered)
    acks_before = receiver.acks_sent

    # idle lead-in before the first frame keeps the receiver grid continuous
    t = receiver.origin + receiver.index * poll if receiver.origin is not None else start
    while t < start:
        receiver.on_sample(PollSample(t, channel.forward.poll(t)))
        if bidirectional:
            channel.reverse.poll(t)
        t += poll
    sender.start(payload, start)
    grace = (len(codec.PREAMBLE_BITS) + 2) * modem_cfg.samples_per_bit
    end = None
    drained = 0
    while True:
        receiver.on_sample(PollSample(t, channel.forward.poll(t)))
        ack = PollSample(t, channel.reverse.poll(t)) if bidirectional else None
        t += poll
        sender.on_tick(t, ack)
        if not sender.done:
            continue
        if bidirectional:
            end = sender.done_at
            break
        if receiver.quiet:
            drained += 1
            if drained >= grace:
                break
        else:
            drained = 0

    received = b"".join(receiver.delivered[first_delivery:])
    frames = receiver.frames[first_frame:]
    if not bidirectional:
        good = [f for f in frames if f.payload is not None]
        end = good[-1].end if good else t
    result = TransferResult(
        delivered=False, sent=bytes(payload), received=received,
        attempts=sender.attempts[first_attempt:], frames=frames,
        acks_sent=receiver.acks_sent - acks_before,
        ack_times=receiver.ack_times[acks_before:],
        start=sender.attempts[first_attempt].start, end=end, failure=sender.failure,
    )
    if sender.failure is None and not bidirectional and received != bytes(payload):
        result.failure = LinkFailed.NOT_RECEIVED
    result.delivered = result.failure is None
    if not result.delivered:
        raise LinkFailed(result.failure, result)
    return result
