"""Payload framing.

Wire layout, MSB-first within each octet::

    +----------+--------+---------+----------+
    | PREAMBLE | LENGTH | PAYLOAD | CHECKSUM |
    |   0xAB   |   1B   | 0-255B  |    1B    |
    +----------+--------+---------+----------+

CHECKSUM is the XOR of the length octet and every payload octet. When the
link layer runs stop-and-wait ARQ it borrows the length MSB as a 1-bit
sequence flag, which caps the payload at 127 octets.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

from .errors import MouselightError

PREAMBLE = 0xAB
MAX_PAYLOAD = 255
MAX_ARQ_PAYLOAD = 127
SEQ_FLAG = 0x80
HEADER_BITS = 16
OVERHEAD_BITS = 24


class CodecError(MouselightError):
    pass


class PayloadTooLarge(CodecError):
    pass


class BadPreamble(CodecError):
    """The first octet is not the sync pattern (misalignment or no frame)."""


class ChecksumMismatch(CodecError):
    """The frame was aligned but its content is corrupt."""


class TruncatedFrame(CodecError):
    pass


class LengthMismatch(CodecError):
    """Bit count disagrees with the length field (a corrupted length)."""


def octet_to_bits(octet: int) -> list[int]:
    return [(octet >> shift) & 1 for shift in range(7, -1, -1)]


def bytes_to_bits(data: Iterable[int]) -> list[int]:
    bits: list[int] = []
    for octet in data:
        bits.extend(octet_to_bits(octet))
    return bits


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    if len(bits) % 8:
        raise ValueError(f"bit count {len(bits)} is not a whole number of octets")
    out = bytearray()
    for i in range(0, len(bits), 8):
        value = 0
        for bit in bits[i:i + 8]:
            value = (value << 1) | (1 if bit else 0)
        out.append(value)
    return bytes(out)


def bits_to_str(bits: Iterable[int]) -> str:
    return "".join("1" if b else "0" for b in bits)


def str_to_bits(text: str) -> list[int]:
    text = text.replace(" ", "")
    if set(text) - {"0", "1"}:
        raise ValueError(f"not a bit string: {text!r}")
    return [int(c) for c in text]


PREAMBLE_BITS = tuple(octet_to_bits(PREAMBLE))


def xor_fold(octets: Iterable[int]) -> int:
    return reduce(lambda acc, octet: acc ^ octet, octets, 0) & 0xFF


@dataclass(frozen=True)
class Frame:
    payload: bytes
    seq: int | None = None

    @property
    def length_octet(self) -> int:
        if self.seq is None:
            return len(self.payload)
        return (SEQ_FLAG if self.seq else 0) | len(self.payload)

    @property
    def checksum(self) -> int:
        return xor_fold([self.length_octet, *self.payload])

    @property
    def bit_length(self) -> int:
        return OVERHEAD_BITS + 8 * len(self.payload)

    def to_bits(self) -> list[int]:
        return bytes_to_bits([PREAMBLE, self.length_octet, *self.payload, self.checksum])


def frame_bit_length(length_octet: int, arq: bool = False) -> int:
    """Total frame size implied by a received length octet."""
    n = length_octet & 0x7F if arq else length_octet
    return OVERHEAD_BITS + 8 * n


def encode_payload(payload: bytes, seq: int | None = None) -> list[int]:
    """Serialize ``payload`` as frame bits.

    ``seq`` (0 or 1) sets the ARQ sequence flag; leave it ``None`` for plain
    framing with the full 8-bit length.
    """
    payload = bytes(payload)
    limit = MAX_PAYLOAD if seq is None else MAX_ARQ_PAYLOAD
    if len(payload) > limit:
        raise PayloadTooLarge(f"payload of {len(payload)} octets exceeds {limit}")
    if seq not in (None, 0, 1):
        raise ValueError(f"sequence flag must be 0 or 1, got {seq!r}")
    return Frame(payload, seq).to_bits()


def read_frame(bits: Sequence[int], arq: bool = False) -> tuple[Frame, int]:
    """Parse one frame from the head of ``bits``.

    Returns the frame and the number of bits consumed. Bits past the frame
    are left alone so callers can keep reading a longer stream.
    """
    if len(bits) < 8:
        raise TruncatedFrame(f"{len(bits)} bits cannot hold a preamble")
    preamble = bits_to_bytes(bits[:8])[0]
    if preamble != PREAMBLE:
        raise BadPreamble(f"expected preamble 0x{PREAMBLE:02X}, got 0x{preamble:02X}")
    if len(bits) < HEADER_BITS:
        raise TruncatedFrame("frame ends inside the length field")
    length_octet = bits_to_bytes(bits[8:16])[0]
    total = frame_bit_length(length_octet, arq)
    if len(bits) < total:
        raise TruncatedFrame(f"length field announces {total} bits, only {len(bits)} present")
    body = bits_to_bytes(bits[8:total])
    payload, checksum = body[1:-1], body[-1]
    if xor_fold(body[:-1]) != checksum:
        raise ChecksumMismatch(
            f"checksum 0x{checksum:02X} does not match computed 0x{xor_fold(body[:-1]):02X}"
        )
    seq = (length_octet >> 7) if arq else None
    return Frame(bytes(payload), seq), total


def decode_frame(bits: Sequence[int], arq: bool = False) -> bytes:
    """Decode a stream holding exactly one frame and return its payload."""
    try:
        frame, consumed = read_frame(bits, arq)
    except TruncatedFrame as exc:
        if len(bits) >= HEADER_BITS:
            raise LengthMismatch(str(exc)) from exc
        raise
    if consumed != len(bits):
        raise LengthMismatch(
            f"length field announces {consumed} bits but the stream holds {len(bits)}"
        )
    return frame.payload
