"""Decode a mouse LED filmed by a camera.

Each frame is reduced to one number, the fraction of pixels that look like
saturated red in HSV, and thresholded into ON/OFF. ON/OFF frames are then
grouped ``fps / bit_rate`` at a time and majority-voted into bits.
Alignment to bit boundaries reuses the modem's preamble search, with one
frame standing in for one poll.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from matplotlib.colors import rgb_to_hsv
from PIL import Image

from . import codec
from .errors import UsageError
from .link import LinkConfig, drive, split_payload
from .modem import ModemConfig, NotFound, find_preamble, group_means, modulate
from .phy import LightState
from .simchannel import (ChannelProfile, ChannelTrace, DeliveryReport, OpticalPath, SessionFailed,
                         lead_in_polls)

FRAME_NAME = "frame_{:05d}.ppm"


class CamDecodeError(UsageError):
    pass


class RateMismatch(CamDecodeError):
    pass


class EmptyDirectory(CamDecodeError):
    pass


class DimensionMismatch(CamDecodeError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    # hue on the halved 0-180 scale
    hue_windows: tuple[tuple[float, float], ...] = ((0.0, 10.0), (170.0, 180.0))
    min_saturation: float = 0.5
    min_value: float = 0.5
    on_fraction: float = 0.002

    def __post_init__(self):
        for lo, hi in self.hue_windows:
            if not 0 <= lo <= hi <= 180:
                raise ValueError(f"hue window ({lo}, {hi}) outside [0, 180]")
        for name in ("min_saturation", "min_value", "on_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class FrameImage:
    index: int
    pixels: np.ndarray
    fps: float = 5.0
    source: str = ""

    @property
    def timestamp_ms(self) -> float:
        return self.index * 1000.0 / self.fps


def red_mask(pixels: np.ndarray, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    """Boolean mask of red pixels for an ``(..., 3)`` RGB array in 0-255."""
    hsv = rgb_to_hsv(np.asarray(pixels, dtype=np.float64) / 255.0)
    hue = hsv[..., 0] * 180.0
    in_window = np.zeros(hue.shape, dtype=bool)
    for lo, hi in cfg.hue_windows:
        in_window |= (hue >= lo) & (hue <= hi)
    return in_window & (hsv[..., 1] >= cfg.min_saturation) & (hsv[..., 2] >= cfg.min_value)


def red_fraction(frame, cfg: MaskConfig = MaskConfig()) -> float:
    pixels = frame.pixels if isinstance(frame, FrameImage) else np.asarray(frame)
    if pixels.size == 0:
        raise ValueError("empty frame")
    return float(red_mask(pixels, cfg).mean())


def _stack(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        return frames
    arrays = [f.pixels if isinstance(f, FrameImage) else np.asarray(f) for f in frames]
    if not arrays:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8)
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            name = getattr(frames[i], "source", "") or f"frame {i}"
            raise DimensionMismatch(f"{name} is {a.shape[1]}x{a.shape[0]}, expected {shape[1]}x{shape[0]}")
    return np.stack(arrays)


def red_fractions(frames, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    stack = _stack(frames)
    if len(stack) == 0:
        return np.zeros(0)
    return red_mask(stack, cfg).reshape(len(stack), -1).mean(axis=1)


def classify_frames(frames, cfg: MaskConfig = MaskConfig()) -> list[LightState]:
    return [LightState.ON if f >= cfg.on_fraction else LightState.OFF
            for f in red_fractions(frames, cfg)]


def frames_per_bit(fps: float, bit_rate: float) -> int:
    if fps <= 0 or bit_rate <= 0:
        raise RateMismatch("fps and bit rate must be positive")
    ratio = fps / bit_rate
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise RateMismatch(f"{fps} fps / {bit_rate} bit/s = {ratio:g} is not a whole number of frames")
    return n


def frames_to_bits(onoff: Sequence[int], fps: float, bit_rate: float, tie_to_one: bool = True) -> list[int]:
    """Majority vote of ON frames per bit; a trailing partial group is dropped."""
    n = frames_per_bit(fps, bit_rate)
    means = group_means(np.asarray([int(x) for x in onoff], dtype=np.uint8), n)
    if tie_to_one:
        return [int(m >= 0.5) for m in means]
    return [int(m > 0.5) for m in means]


def _frame_modem(n: int) -> ModemConfig:
    # one "millisecond" per frame: the modem only needs the ratio
    return ModemConfig(bit_period_ms=n, poll_interval_ms=1)


def decode_onoff(onoff: Sequence[int], fps: float, bit_rate: float, arq: bool = True) -> list[bytes]:
    """Find and decode every frame in an ON/OFF sequence.

    Raises ``NotFound`` when no preamble occurs at all.
    """
    n = frames_per_bit(fps, bit_rate)
    moved = np.asarray([int(x) for x in onoff], dtype=np.uint8)
    cfg = _frame_modem(n)
    payloads = []
    pos = 0
    seen = False
    while pos < len(moved):
        try:
            offset = pos + find_preamble(moved[pos:], cfg)
        except NotFound:
            break
        seen = True
        bits = frames_to_bits(moved[offset:], fps, bit_rate)
        try:
            frame, consumed = codec.read_frame(bits, arq)
        except codec.TruncatedFrame:
            break
        except codec.CodecError:
            pos = offset + n
            continue
        payloads.append(frame.payload)
        pos = offset + consumed * n
    if not seen:
        raise NotFound("no preamble in frame sequence")
    return payloads


def decode_auto(onoff: Sequence[int], fps: float, bit_rate: float) -> tuple[bytes, str]:
    """Framed decode when a preamble is present, else raw bits from frame 0."""
    try:
        return b"".join(decode_onoff(onoff, fps, bit_rate)), "framed"
    except NotFound:
        bits = frames_to_bits(onoff, fps, bit_rate)
        bits = bits[:len(bits) - len(bits) % 8]
        return codec.bits_to_bytes(bits), "raw"


def render_frame(lit: bool, shape: tuple[int, int] = (48, 64), square: int = 8,
                 color: tuple[int, int, int] = (255, 0, 0)) -> np.ndarray:
    """Black frame with a red square in the middle when ``lit``."""
    h, w = shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    if lit:
        top, left = (h - square) // 2, (w - square) // 2
        img[top:top + square, left:left + square] = color
    return img


def render_onoff(onoff: Iterable[int], shape: tuple[int, int] = (48, 64), square: int = 8) -> np.ndarray:
    on = np.asarray(list(onoff), dtype=bool)
    frames = np.zeros((len(on), *shape, 3), dtype=np.uint8)
    frames[on] = render_frame(True, shape, square)
    return frames


def bits_to_onoff(bits: Sequence[int], per_bit: int, lead: int = 0, tail: int = 0) -> list[int]:
    return [0] * lead + [int(b) for b in bits for _ in range(per_bit)] + [0] * tail


def write_frames(directory: str, frames: np.ndarray) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, pixels in enumerate(frames):
        path = os.path.join(directory, FRAME_NAME.format(i))
        Image.fromarray(pixels, "RGB").save(path, format="PPM")
        paths.append(path)
    return paths


_NUMBER = re.compile(r"(\d+)")


def _frame_key(name: str):
    nums = _NUMBER.findall(name)
    return (int(nums[-1]) if nums else -1, name)


def read_frames(directory: str, fps: float = 5.0) -> list[FrameImage]:
    if not os.path.isdir(directory):
        raise EmptyDirectory(f"{directory} is not a directory")
    names = sorted((n for n in os.listdir(directory) if n.lower().endswith((".ppm", ".pnm"))),
                   key=_frame_key)
    if not names:
        raise EmptyDirectory(f"no .ppm frames in {directory}")
    frames = []
    shape = None
    for i, name in enumerate(names):
        path = os.path.join(directory, name)
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"))
        if shape is None:
            shape = pixels.shape
        elif pixels.shape != shape:
            raise DimensionMismatch(
                f"{name} is {pixels.shape[1]}x{pixels.shape[0]}, expected {shape[1]}x{shape[0]}")
        frames.append(FrameImage(i, pixels, fps, name))
    return frames


def classification_log(frames: Sequence[FrameImage], cfg: MaskConfig = MaskConfig()) -> list[dict]:
    fractions = red_fractions(frames, cfg)
    return [{"index": f.index, "timestamp_ms": round(f.timestamp_ms, 3), "file": f.source,
             "red_fraction": round(float(r), 6),
             "state": str(LightState.ON if r >= cfg.on_fraction else LightState.OFF)}
            for f, r in zip(frames, fractions)]


def run_camera_session(payload: bytes, profile: ChannelProfile, seed: int,
                       link_cfg: LinkConfig | None = None, shape: tuple[int, int] = (12, 16),
                       square: int = 4, mask: MaskConfig = MaskConfig()
                       ) -> tuple[ChannelTrace, DeliveryReport]:
    """Blink ``payload`` on a simulated mouse and decode it from rendered frames.

    The camera cannot answer, so each chunk goes out once. A frame shows the
    red square with probability ``p_detect`` (attenuated) if the LED was lit
    during its exposure and ``p_spurious`` otherwise.
    """
    link_cfg = link_cfg or LinkConfig()
    cfg = profile.modem
    n = cfg.samples_per_bit
    fps = 1000.0 / profile.poll_interval_ms
    bit_rate = 1000.0 / profile.bit_period_ms
    path = OpticalPath(profile, np.random.SeedSequence(seed).spawn(2)[0], profile.handle("tx"))
    lead = lead_in_polls(profile, seed) * profile.poll_interval_ms
    t = lead
    attempts = []
    seq = 0
    for chunk in split_payload(bytes(payload), link_cfg.max_chunk):
        bits = codec.encode_payload(chunk, seq if link_cfg.arq else None)
        start = t + profile.on_latency_ms
        drive(path, modulate(bits, cfg, start))
        attempts.append((start, bits))
        t = start + len(bits) * profile.bit_period_ms + link_cfg.inter_frame_gap_bits * profile.bit_period_ms
        seq ^= 1
    total = (t + (len(codec.PREAMBLE_BITS) + 2) * profile.bit_period_ms) // profile.poll_interval_ms
    lit = path.poll_many(0, total)
    frames = render_onoff(lit, shape, square)
    onoff = [int(s) for s in classify_frames(frames, mask)]

    try:
        chunks = decode_onoff(onoff, fps, bit_rate, link_cfg.arq)
    except NotFound:
        chunks = []
    received = b"".join(chunks)
    errors = nbits = 0
    decoded, means = [], []
    for start, bits in attempts:
        first = start // profile.poll_interval_ms
        m = group_means(np.asarray(onoff[first:first + len(bits) * n], dtype=np.uint8), n)
        d = [int(x >= 0.5) for x in m]
        errors += sum(a != b for a, b in zip(d, bits))
        nbits += len(bits)
        decoded.append(d)
        means.append([round(float(x), 6) for x in m])
    first_start = attempts[0][0]
    last_end = attempts[-1][0] + len(attempts[-1][1]) * profile.bit_period_ms
    duration = last_end - first_start
    air = sum(len(b) * profile.bit_period_ms for _, b in attempts)
    delivered = received == bytes(payload)
    report = DeliveryReport(
        delivered=delivered, sent=bytes(payload), received=received,
        raw_bit_errors=errors, raw_bits=nbits, retries=0, max_retries_per_frame=0,
        attempts=len(attempts), acks_sent=0,
        raw_channel_rate_bps=1000.0 * nbits / air,
        effective_throughput_bps=1000.0 * 8 * len(payload) / duration if delivered else 0.0,
        duration_ms=duration, failure=None if delivered else "not_received",
    )
    trace = ChannelTrace(seed, profile, path.spans[:], list(path.events), decoded, means,
                         _camera_records(path, onoff, attempts, profile))
    if not delivered:
        raise SessionFailed("not_received", report, trace)
    return trace, report


def _camera_records(path: OpticalPath, onoff: Sequence[int], attempts, profile: ChannelProfile):
    records = [(eff, "tx_light", f"{state} issued_at={at}") for at, state, eff in path.commands]
    records += [(i * profile.poll_interval_ms, "rx_frame_on", f"index={i}")
                for i, v in enumerate(onoff) if v]
    records += [(start, "tx_frame", f"attempt={k} bits={len(bits)}")
                for k, (start, bits) in enumerate(attempts)]
    records.sort(key=lambda r: (r[0], r[1], r[2]))
    return records
