"""On-off keying over a mouse LED and poll-and-average demodulation.

A 1 keeps the emitter lit for a whole bit period, a 0 keeps it dark, and
runs of equal bits are one sustained state. The receiver never sees light
directly: it polls the movement stream every ``poll_interval_ms``, records
whether anything moved, and decides each bit from the mean of the
``samples_per_bit`` polls that fall in it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .codec import PREAMBLE_BITS
from .errors import MouselightError
from .phy import LightState


class ModemError(MouselightError):
    pass


class InvalidConfig(ModemError):
    pass


class IncompleteBit(ModemError):
    """The sample stream stops partway through a bit period."""


class NotFound(ModemError):
    pass


@dataclass(frozen=True)
class ModemConfig:
    bit_period_ms: int = 1000
    poll_interval_ms: int = 100
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.poll_interval_ms <= 0 or self.bit_period_ms <= 0:
            raise InvalidConfig("bit period and poll interval must be positive")
        if self.bit_period_ms % self.poll_interval_ms:
            raise InvalidConfig(
                f"bit period {self.bit_period_ms} ms is not a multiple of "
                f"poll interval {self.poll_interval_ms} ms"
            )
        if not 0 < self.decision_threshold < 1:
            raise InvalidConfig(f"decision threshold {self.decision_threshold} outside (0, 1)")

    @property
    def samples_per_bit(self) -> int:
        return self.bit_period_ms // self.poll_interval_ms


class LightCommand(NamedTuple):
    at: int
    state: LightState


class PollSample(NamedTuple):
    at: int
    moved: int


def modulate(bits: Sequence[int], cfg: ModemConfig, start: int = 0) -> list[LightCommand]:
    if not len(bits):
        raise ValueError("nothing to modulate")
    commands: list[LightCommand] = []
    for i, bit in enumerate(bits):
        state = LightState.ON if bit else LightState.OFF
        if not commands or commands[-1].state != state:
            commands.append(LightCommand(start + i * cfg.bit_period_ms, state))
    if commands[-1].state == LightState.ON:
        commands.append(LightCommand(start + len(bits) * cfg.bit_period_ms, LightState.OFF))
    return commands


def moved_array(event_times: Iterable[int], start: int, n_polls: int, poll_ms: int) -> np.ndarray:
    """Per-poll movement flags for windows ``[start + k*poll, start + (k+1)*poll)``."""
    times = np.fromiter(event_times, dtype=np.int64)
    moved = np.zeros(n_polls, dtype=np.uint8)
    if times.size:
        idx = (times - start) // poll_ms
        idx = idx[(idx >= 0) & (idx < n_polls)]
        moved[idx] = 1
    return moved


def sample(events, cfg: ModemConfig, start: int = 0, n_polls: int | None = None) -> list[PollSample]:
    """Bin movement events into poll samples.

    Without ``n_polls`` the samples run up to the window holding the last event.
    """
    times = [e.at for e in events]
    if n_polls is None:
        n_polls = (max(times) - start) // cfg.poll_interval_ms + 1 if times else 0
    poll = cfg.poll_interval_ms
    moved = moved_array(times, start, n_polls, poll)
    return [PollSample(start + k * poll, int(m)) for k, m in enumerate(moved)]


def _moved_of(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    return np.fromiter((s.moved for s in samples), dtype=np.uint8, count=len(samples))


def group_means(moved: np.ndarray, spb: int) -> np.ndarray:
    n = len(moved) // spb
    return moved[:n * spb].reshape(n, spb).mean(axis=1)


def bit_means(samples: Sequence[PollSample], cfg: ModemConfig, start: int | None = None) -> np.ndarray:
    moved = _moved_of(samples[_start_index(samples, cfg, start):])
    spb = cfg.samples_per_bit
    if len(moved) % spb:
        raise IncompleteBit(f"{len(moved) % spb} trailing samples do not fill a {spb}-sample bit")
    return group_means(moved, spb)


def _start_index(samples: Sequence[PollSample], cfg: ModemConfig, start: int | None) -> int:
    if start is None or not len(samples):
        return 0
    offset = start - samples[0].at
    if offset < 0 or offset % cfg.poll_interval_ms:
        raise ValueError(f"start {start} ms is not on the sample grid")
    return offset // cfg.poll_interval_ms


def decide_bits(samples: Sequence[PollSample], cfg: ModemConfig, start: int | None = None) -> list[int]:
    """One bit per ``samples_per_bit`` samples from ``start``: 1 iff mean >= threshold."""
    means = bit_means(samples, cfg, start)
    return [int(m >= cfg.decision_threshold) for m in means]


class PatternSearch:
    """Streaming search for a bit pattern in poll samples.

    The first offset whose bit decisions reproduce ``pattern`` only brackets
    the true alignment: with a 0.5 threshold a window shifted by up to half
    a bit still decides the same way. Once that candidate appears the search
    reads ``samples_per_bit - 1`` more samples and returns the matching
    offset whose expanded template agrees with the most samples, earliest
    on ties.
    """

    def __init__(self, cfg: ModemConfig, pattern: Sequence[int] = PREAMBLE_BITS):
        self.cfg = cfg
        self.pattern = tuple(int(b) for b in pattern)
        self.spb = cfg.samples_per_bit
        self.span = len(self.pattern) * self.spb
        self.template = np.repeat(np.array(self.pattern, dtype=np.uint8), self.spb)
        self.buf: deque[int] = deque()
        self.base = 0
        self.candidate: int | None = None

    def reset(self, base: int) -> None:
        self.buf.clear()
        self.base = base
        self.candidate = None

    def state_key(self) -> tuple:
        return (self.candidate is not None, tuple(self.buf))

    def _matches(self, window: np.ndarray) -> bool:
        means = group_means(window, self.spb)
        return all(int(m >= self.cfg.decision_threshold) == p for m, p in zip(means, self.pattern))

    def push(self, moved: int) -> int | None:
        self.buf.append(1 if moved else 0)
        if self.candidate is None:
            while len(self.buf) >= self.span:
                window = np.fromiter(self.buf, dtype=np.uint8, count=self.span)
                if self._matches(window):
                    self.candidate = self.base
                    break
                self.buf.popleft()
                self.base += 1
        if self.candidate is not None and len(self.buf) >= self.span + self.spb - 1:
            return self._refine()
        return None

    def finish(self) -> int | None:
        """Resolve a pending candidate with whatever lookahead exists."""
        if self.candidate is None:
            return None
        return self._refine()

    def _refine(self) -> int:
        data = np.fromiter(self.buf, dtype=np.uint8)
        best, best_score = 0, -1
        for k in range(min(self.spb, len(data) - self.span + 1)):
            window = data[k:k + self.span]
            if not self._matches(window):
                continue
            score = int(np.count_nonzero(window == self.template))
            if score > best_score:
                best, best_score = k, score
        return self.base + best


def find_pattern(samples, cfg: ModemConfig, pattern: Sequence[int]) -> int:
    search = PatternSearch(cfg, pattern)
    for m in _moved_of(samples):
        found = search.push(m)
        if found is not None:
            return found
    found = search.finish()
    if found is None:
        raise NotFound(f"pattern {''.join(map(str, search.pattern))} not in {len(samples)} samples")
    return found


def find_preamble(samples, cfg: ModemConfig) -> int:
    """Sample offset at which the frame preamble starts."""
    return find_pattern(samples, cfg, PREAMBLE_BITS)
