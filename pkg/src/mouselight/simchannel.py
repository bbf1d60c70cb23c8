"""Seeded simulation of the optical coupling between an emitter and a photocell.

While the emitter is lit the sensor reports movement in each poll window
with probability ``p_detect * attenuation(distance)``; while dark, with
probability ``p_spurious``. Exactly one detection uniform is drawn per
window whatever the outcome, so two runs that differ only in a probability
see the same random numbers (common random numbers make sweeps monotone
per seed, not just on average). Event timing and dx/dy come from a second,
independent stream.

PRNG: numpy ``PCG64`` seeded through ``SeedSequence``; each path gets its
own spawned child.
"""

from __future__ import annotations

import bisect
import dataclasses
import json
from dataclasses import dataclass, field
from typing import IO, Callable, Iterable, Mapping

import numpy as np

from . import codec
from .errors import MouselightError, UsageError
from .link import Attempt, LinkConfig, LinkFailed, TransferResult, transfer
from .modem import LightCommand, ModemConfig, group_means
from .phy import EmitterHandle, LightState, MovementPacket

PRNG = "numpy.random.PCG64"
TRACE_SCHEMA = "mouselight.trace/1"


class InvalidProfile(UsageError):
    pass


class SessionFailed(MouselightError):
    def __init__(self, reason: str, report: "DeliveryReport", trace: "ChannelTrace"):
        super().__init__(f"session failed: {reason}")
        self.reason = reason
        self.report = report
        self.trace = trace


def attenuation(distance_cm: float, d_max_cm: float) -> float:
    if distance_cm < 0:
        raise ValueError("distance must be non-negative")
    if d_max_cm <= 0:
        raise ValueError("d_max must be positive")
    return max(0.0, 1.0 - distance_cm / d_max_cm)


@dataclass(frozen=True)
class ChannelProfile:
    name: str
    p_detect: float = 0.95
    p_spurious: float = 0.01
    on_latency_ms: int = 0
    off_latency_ms: int = 0
    poll_interval_ms: int = 100
    bit_period_ms: int = 2000
    distance_cm: float = 0.0
    d_max_cm: float = 5.0
    bidirectional: bool = True
    receiver: str = "mouse"

    def __post_init__(self):
        for name in ("p_detect", "p_spurious"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidProfile(f"{name}={value} outside [0, 1]")
        if self.poll_interval_ms <= 0 or self.bit_period_ms % self.poll_interval_ms:
            raise InvalidProfile(
                f"bit period {self.bit_period_ms} ms is not a positive multiple of "
                f"poll interval {self.poll_interval_ms} ms"
            )
        for name in ("on_latency_ms", "off_latency_ms"):
            value = getattr(self, name)
            if value < 0 or value > self.bit_period_ms:
                raise InvalidProfile(f"{name}={value} must lie in [0, bit period]")
        if self.distance_cm < 0 or self.d_max_cm <= 0:
            raise InvalidProfile("distance must be >= 0 and d_max > 0")
        if self.receiver not in ("mouse", "camera"):
            raise InvalidProfile(f"unknown receiver {self.receiver!r}")

    @property
    def effective_p_detect(self) -> float:
        return self.p_detect * attenuation(self.distance_cm, self.d_max_cm)

    @property
    def modem(self) -> ModemConfig:
        return ModemConfig(self.bit_period_ms, self.poll_interval_ms)

    def handle(self, device_id: str = "sim") -> EmitterHandle:
        return EmitterHandle(device_id, self.on_latency_ms, self.off_latency_ms)

    def replace(self, **overrides) -> "ChannelProfile":
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise InvalidProfile(f"unknown profile fields: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PROFILES = {
    "linux-mouse": ChannelProfile("linux-mouse", bit_period_ms=2000, poll_interval_ms=100,
                                  off_latency_ms=100),
    "windows-mouse": ChannelProfile("windows-mouse", bit_period_ms=4000, poll_interval_ms=100,
                                    off_latency_ms=2000),
    "torch": ChannelProfile("torch", bit_period_ms=100, poll_interval_ms=10, d_max_cm=30.0,
                            bidirectional=False),
    "camera": ChannelProfile("camera", bit_period_ms=2000, poll_interval_ms=200, off_latency_ms=100,
                             d_max_cm=1500.0, bidirectional=False, receiver="camera"),
}


def get_profile(name: str, **overrides) -> ChannelProfile:
    try:
        base = PROFILES[name]
    except KeyError:
        raise InvalidProfile(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None
    return base.replace(**overrides) if overrides else base


def lit_intervals(transitions: Iterable[tuple[int, LightState]]) -> list[tuple[int, int]]:
    """Collapse effective ``(time, state)`` transitions into lit ``[start, end)`` spans."""
    spans = []
    on_at = None
    for t, state in transitions:
        if state == LightState.ON and on_at is None:
            on_at = t
        elif state == LightState.OFF and on_at is not None:
            if t > on_at:
                spans.append((on_at, t))
            on_at = None
    if on_at is not None:
        spans.append((on_at, np.iinfo(np.int64).max))
    return spans


class OpticalPath:
    """Emitter on one side, polled photocell on the other.

    ``set_light`` takes command (issue) times and applies the emitter
    latency. ``poll(t)`` must be called once per window, in time order.
    """

    def __init__(self, profile: ChannelProfile, seed: np.random.SeedSequence,
                 handle: EmitterHandle | None = None):
        self.profile = profile
        self.handle = handle or profile.handle()
        detect_seed, detail_seed = seed.spawn(2)
        self._detect = np.random.Generator(np.random.PCG64(detect_seed))
        self._detail = np.random.Generator(np.random.PCG64(detail_seed))
        self.commands: list[tuple[int, LightState, int]] = []
        self.transitions: list[tuple[int, LightState]] = []
        self.forced: list[tuple[int, int, int]] = []
        self.events: list[MovementPacket] = []
        self.polls: list[int] = []
        self.poll_origin: int | None = None
        self._spans: list[tuple[int, int]] | None = None

    def set_light(self, state: LightState, at: int) -> int:
        state = LightState(state)
        effective = at + self.handle.latency(state)
        if self.transitions and effective < self.transitions[-1][0]:
            raise ValueError(f"light change at {effective} ms precedes one at {self.transitions[-1][0]} ms")
        self.commands.append((at, state, effective))
        self.transitions.append((effective, state))
        self._spans = None
        return effective

    def force(self, start: int, end: int, moved: bool) -> None:
        """Override the sensor for windows starting in ``[start, end)``."""
        self.forced.append((start, end, 1 if moved else 0))

    @property
    def spans(self) -> list[tuple[int, int]]:
        if self._spans is None:
            self._spans = lit_intervals(self.transitions)
            self._ends = [e for _, e in self._spans]
        return self._spans

    def _overlap(self, w0: int, w1: int) -> tuple[int, int] | None:
        spans = self.spans
        i = bisect.bisect_right(self._ends, w0)
        if i < len(spans) and spans[i][0] < w1:
            return max(w0, spans[i][0]), min(w1, spans[i][1])
        return None

    def _forced(self, w0: int) -> int | None:
        value = None
        for start, end, moved in self.forced:
            if start <= w0 < end:
                value = moved
        return value

    def poll(self, t: int) -> int:
        P = self.profile.poll_interval_ms
        if self.poll_origin is None:
            self.poll_origin = t
        elif t != self.poll_origin + len(self.polls) * P:
            raise ValueError(f"poll at {t} ms is out of sequence")
        u = self._detect.random()
        lit = self._overlap(t, t + P)
        p = self.profile.effective_p_detect if lit else self.profile.p_spurious
        moved = int(u < p)
        forced = self._forced(t)
        if forced is not None:
            moved = forced
        if moved:
            lo, hi = lit if lit else (t, t + P)
            d = self._detail.random(3)
            at = lo + int(d[0] * (hi - lo))
            self.events.append(MovementPacket(at, 0x08, _nudge(d[1]), _nudge(d[2])))
        self.polls.append(moved)
        return moved

    def poll_many(self, t: int, n: int) -> np.ndarray:
        """Vectorised equivalent of ``n`` successive ``poll`` calls from ``t``."""
        P = self.profile.poll_interval_ms
        if self.poll_origin is None:
            self.poll_origin = t
        elif t != self.poll_origin + len(self.polls) * P:
            raise ValueError(f"poll at {t} ms is out of sequence")
        u = self._detect.random(n)
        w0 = t + P * np.arange(n, dtype=np.int64)
        w1 = w0 + P
        spans = self.spans
        lit = np.zeros(n, dtype=bool)
        lo, hi = w0.copy(), w1.copy()
        if spans:
            starts = np.array([s for s, _ in spans], dtype=np.int64)
            ends = np.array([e for _, e in spans], dtype=np.int64)
            i = np.searchsorted(ends, w0, side="right")
            ok = i < len(spans)
            ic = np.minimum(i, len(spans) - 1)
            lit = ok & (starts[ic] < w1)
            lo = np.where(lit, np.maximum(w0, starts[ic]), w0)
            hi = np.where(lit, np.minimum(w1, ends[ic]), w1)
        p = np.where(lit, self.profile.effective_p_detect, self.profile.p_spurious)
        moved = (u < p).astype(np.uint8)
        for start, end, value in self.forced:
            moved[(w0 >= start) & (w0 < end)] = value
        idx = np.flatnonzero(moved)
        d = self._detail.random((idx.size, 3))
        at = lo[idx] + (d[:, 0] * (hi[idx] - lo[idx])).astype(np.int64)
        dx = _nudge_array(d[:, 1])
        dy = _nudge_array(d[:, 2])
        self.events.extend(MovementPacket(int(a), 0x08, int(x), int(y))
                           for a, x, y in zip(at, dx, dy))
        self.polls.extend(int(m) for m in moved)
        return moved


_NUDGES = (-3, -2, -1, 1, 2, 3)


def _nudge(u: float) -> int:
    return _NUDGES[min(int(u * 6), 5)]


def _nudge_array(u: np.ndarray) -> np.ndarray:
    return np.array(_NUDGES, dtype=np.int64)[np.minimum((u * 6).astype(np.int64), 5)]


def propagate(commands: Iterable[LightCommand], profile: ChannelProfile, seed: int,
              start: int = 0, end: int | None = None) -> list[MovementPacket]:
    """Movement packets produced by a command schedule, one Bernoulli per poll window.

    ``commands`` are issue times; latencies from ``profile`` are applied.
    The run covers ``[start, end)``; by default it stops one bit period
    after the last light change.
    """
    path = OpticalPath(profile, np.random.SeedSequence(seed))
    for cmd in commands:
        path.set_light(cmd.state, cmd.at)
    if end is None:
        last = path.transitions[-1][0] if path.transitions else start
        end = last + profile.bit_period_ms
    n = max(0, -(-(end - start) // profile.poll_interval_ms))
    path.poll_many(start, n)
    return path.events


@dataclass
class SimulatedChannel:
    """Forward path from sender to receiver and, if bidirectional, a return path."""

    profile: ChannelProfile
    seed: int
    faults: Mapping[int, str] | Callable[[int], str | None] | None = None
    forward: OpticalPath = field(init=False)
    reverse: OpticalPath | None = field(init=False)
    link_cfg: LinkConfig = field(default_factory=LinkConfig)

    def __post_init__(self):
        fwd, rev = np.random.SeedSequence(self.seed).spawn(2)
        self.forward = OpticalPath(self.profile, fwd, self.profile.handle("tx"))
        self.reverse = OpticalPath(self.profile, rev, self.profile.handle("rx")) if self.profile.bidirectional else None

    def fault_for(self, index: int) -> str | None:
        if self.faults is None:
            return None
        if callable(self.faults):
            return self.faults(index)
        return self.faults.get(index)

    def on_attempt(self, attempt: Attempt) -> None:
        """Apply the scripted fault, if any, to this transmission."""
        fault = self.fault_for(attempt.index)
        if fault is None:
            return
        bp = self.profile.bit_period_ms
        if fault == "drop":
            self.forward.force(attempt.start, attempt.end, False)
        elif fault == "corrupt":
            # invert the first payload bit, or the checksum MSB for an empty payload
            pos = codec.HEADER_BITS
            t0 = attempt.start + pos * bp
            self.forward.force(t0, t0 + bp, not attempt.bits[pos])
        elif fault == "drop-ack":
            if self.reverse is not None:
                window = self.link_cfg.ack_window_bits * bp
                self.reverse.force(attempt.end, attempt.end + window, False)
        else:
            raise ValueError(f"unknown fault {fault!r}")


@dataclass
class ChannelTrace:
    seed: int
    profile: ChannelProfile
    light_intervals: list[tuple[int, int]]
    events: list[MovementPacket]
    decoded_bits: list[list[int]]
    bit_means: list[list[float]]
    records: list[tuple[int, str, str]]

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"time_ms": t, "kind": k, "detail": d}, sort_keys=True)
                 for t, k, d in self.records]
        return lines

    def write(self, fh: IO[str], summary: Mapping | None = None) -> None:
        for line in self.to_lines():
            fh.write(line + "\n")
        record = {"kind": "summary", "schema": TRACE_SCHEMA, "seed": self.seed,
                  "prng": PRNG, "events": len(self.events),
                  "light_intervals": len(self.light_intervals)}
        if summary:
            record.update(summary)
        fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class DeliveryReport:
    delivered: bool
    sent: bytes
    received: bytes
    raw_bit_errors: int
    raw_bits: int
    retries: int
    max_retries_per_frame: int
    attempts: int
    acks_sent: int
    raw_channel_rate_bps: float
    effective_throughput_bps: float
    duration_ms: int
    failure: str | None = None

    @property
    def raw_ber(self) -> float:
        return self.raw_bit_errors / self.raw_bits if self.raw_bits else 0.0


def attempt_bit_means(path: OpticalPath, attempt: Attempt, profile: ChannelProfile) -> np.ndarray:
    """Per-bit movement means at the true alignment of one transmission."""
    P = profile.poll_interval_ms
    spb = profile.bit_period_ms // P
    first = (attempt.start - path.poll_origin) // P
    moved = np.zeros(len(attempt.bits) * spb, dtype=np.uint8)
    got = np.asarray(path.polls[first:first + moved.size], dtype=np.uint8)
    moved[:got.size] = got
    return group_means(moved, spb)


def build_report(result: TransferResult, channel: SimulatedChannel) -> tuple[DeliveryReport, ChannelTrace]:
    profile = channel.profile
    threshold = profile.modem.decision_threshold
    bit_errors = bits = 0
    air_ms = 0
    decoded, means = [], []
    for att in result.attempts:
        m = attempt_bit_means(channel.forward, att, profile)
        d = [int(x >= threshold) for x in m]
        bit_errors += sum(a != b for a, b in zip(d, att.bits))
        bits += len(att.bits)
        air_ms += att.end - att.start
        decoded.append(d)
        means.append([round(float(x), 6) for x in m])
    duration = max(0, result.end - result.start)
    payload_bits = 8 * len(result.sent)
    records = _records(result, channel)
    per_frame = result.retries_per_frame
    report = DeliveryReport(
        delivered=result.delivered and result.received == result.sent,
        sent=result.sent, received=result.received,
        raw_bit_errors=bit_errors, raw_bits=bits,
        retries=result.retries, max_retries_per_frame=max(per_frame) if per_frame else 0,
        attempts=len(result.attempts), acks_sent=result.acks_sent,
        raw_channel_rate_bps=1000.0 * bits / air_ms if air_ms else 0.0,
        effective_throughput_bps=1000.0 * payload_bits / duration if duration and result.delivered else 0.0,
        duration_ms=duration, failure=result.failure,
    )
    trace = ChannelTrace(channel.seed, profile, channel.forward.spans[:], list(channel.forward.events),
                         decoded, means, records)
    return report, trace


def _records(result: TransferResult, channel: SimulatedChannel) -> list[tuple[int, str, str]]:
    records = []
    for at, state, eff in channel.forward.commands:
        records.append((eff, "tx_light", f"{state} issued_at={at}"))
    for ev in channel.forward.events:
        records.append((ev.at, "rx_movement", f"dx={ev.dx} dy={ev.dy}"))
    for att in result.attempts:
        records.append((att.start, "tx_frame", f"attempt={att.index} chunk={att.chunk} seq={att.seq} "
                                               f"bits={len(att.bits)}"))
        if att.acked:
            records.append((att.ack_at, "tx_ack_seen", f"attempt={att.index}"))
    for fr in result.frames:
        status = fr.error or ("duplicate" if fr.duplicate else "ok")
        records.append((fr.end, "rx_frame", f"status={status} seq={fr.seq} start={fr.start} "
                                            f"bits={codec.bits_to_str(fr.bits)}"))
    for t in result.ack_times:
        records.append((t, "rx_ack_sent", "pattern=1010"))
    if channel.reverse is not None:
        for at, state, eff in channel.reverse.commands:
            records.append((eff, "rx_light", f"{state} issued_at={at}"))
    records.sort(key=lambda r: (r[0], r[1], r[2]))
    return records


def lead_in_polls(profile: ChannelProfile, seed: int) -> int:
    """Seeded idle stretch before the first frame, between one and two bit periods."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1EAD])))
    spb = profile.bit_period_ms // profile.poll_interval_ms
    return spb + int(rng.integers(0, spb))


def run_session(payload: bytes, profile: ChannelProfile, seed: int,
                link_cfg: LinkConfig | None = None,
                faults: Mapping[int, str] | Callable[[int], str | None] | None = None,
                ) -> tuple[ChannelTrace, DeliveryReport]:
    """Send ``payload`` over a simulated mouse receiver and report on it.

    Raises ``SessionFailed`` (carrying report and trace) if it was not delivered.
    """
    if profile.receiver != "mouse":
        raise InvalidProfile(f"profile {profile.name!r} has a {profile.receiver} receiver; "
                             "use camdecode.run_camera_session")
    link_cfg = link_cfg or LinkConfig()
    channel = SimulatedChannel(profile, seed, faults, link_cfg=link_cfg)
    start = lead_in_polls(profile, seed) * profile.poll_interval_ms
    try:
        result = transfer(payload, channel, profile.modem, link_cfg, start=start,
                          on_attempt=channel.on_attempt)
    except LinkFailed as exc:
        if exc.result is None:
            raise
        report, trace = build_report(exc.result, channel)
        raise SessionFailed(exc.reason, report, trace) from exc
    report, trace = build_report(result, channel)
    return trace, report
