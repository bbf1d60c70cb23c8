"""Physical layer: light emitters, movement sources and the shared clock.

Two families live here. The simulated side (``VirtualClock``,
``SimEmitter``, ``PacketReader``) is what every test and the simulator use.
The live Linux side (``SysfsEmitter``, ``DevInputMice``, ``discover_mice``)
drives a real USB mouse: unbinding the driver turns the LED off, binding it
turns it on, and movement arrives as 3-octet packets on ``/dev/input/mice``.

Windows is not implemented. There the device is discovered with
``Get-PnpDevice`` and toggled with ``-InstanceId {id} -Confirm:$false`` on
``Disable-PnpDevice`` (LED off) or ``Enable-PnpDevice`` (LED on). Some
write-ups label these the other way round; disabling a device cutting its
power is the reading used here. It only enters this package as the
``windows-mouse`` latency profile.
"""

from __future__ import annotations

import enum
import errno
import glob
import os
import select
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple

from .errors import DeviceError, MouselightError

SYSFS_DEVICES = "/sys/bus/usb/devices"
SYSFS_DRIVER = "/sys/bus/usb/drivers/usb"
DEV_INPUT_MICE = "/dev/input/mice"
PACKET_SIZE = 3
# PS/2 byte 0: bit 3 is always set.
PS2_SYNC_BIT = 0x08


class NoMouseFound(DeviceError):
    pass


class DeviceGone(DeviceError):
    pass


class PermissionDenied(DeviceError):
    pass


class SourceClosed(MouselightError):
    pass


class LightState(enum.IntEnum):
    OFF = 0
    ON = 1

    def __str__(self) -> str:
        return self.name


class MovementPacket(NamedTuple):
    at: int
    flags: int = PS2_SYNC_BIT
    dx: int = 0
    dy: int = 0

    @classmethod
    def from_bytes(cls, raw: bytes, at: int) -> "MovementPacket":
        if len(raw) != PACKET_SIZE:
            raise ValueError(f"movement packet needs {PACKET_SIZE} octets, got {len(raw)}")
        return cls(at, raw[0], _signed(raw[1]), _signed(raw[2]))

    def to_bytes(self) -> bytes:
        return bytes([self.flags & 0xFF, self.dx & 0xFF, self.dy & 0xFF])


def _signed(octet: int) -> int:
    return octet - 256 if octet >= 128 else octet


@dataclass(frozen=True)
class EmitterHandle:
    device_id: str
    on_latency_ms: int = 0
    off_latency_ms: int = 0
    product: str = ""

    def __post_init__(self):
        if self.on_latency_ms < 0 or self.off_latency_ms < 0:
            raise ValueError("emitter latencies must be non-negative")

    def latency(self, state: LightState) -> int:
        return self.on_latency_ms if state == LightState.ON else self.off_latency_ms


class VirtualClock:
    """Deterministic millisecond clock. ``sleep_until`` just jumps."""

    def __init__(self, now: int = 0):
        self._now = now

    @property
    def now(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot run backwards")
        self._now += ms
        return self._now

    def sleep_until(self, t: int) -> None:
        if t > self._now:
            self._now = t


class WallClock:
    """Milliseconds since construction, backed by ``time.monotonic``."""

    def __init__(self):
        self._origin = time.monotonic()

    @property
    def now(self) -> int:
        return int((time.monotonic() - self._origin) * 1000)

    def sleep_until(self, t: int) -> None:
        delay = (t - self.now) / 1000
        if delay > 0:
            time.sleep(delay)


def enumerate_mice(listing: Mapping[str, str], pattern: str | None = None,
                   on_latency_ms: int = 0, off_latency_ms: int = 0) -> list[EmitterHandle]:
    """Pick out mice from a ``{device_id: product string}`` listing.

    Listing order is preserved; callers normally take the first handle.
    With ``pattern`` only products that also contain it (case-insensitive)
    are kept.
    """
    handles = []
    for device_id, product in listing.items():
        name = product.strip().lower()
        if "mouse" not in name:
            continue
        if pattern and pattern.lower() not in name:
            continue
        handles.append(EmitterHandle(device_id, on_latency_ms, off_latency_ms, product.strip()))
    if not handles:
        wanted = f"mouse matching {pattern!r}" if pattern else "mouse"
        raise NoMouseFound(f"no {wanted} among {len(listing)} USB devices")
    return handles


def discover_mice(root: str = SYSFS_DEVICES) -> dict[str, str]:
    """Read ``<root>/*/product`` into a listing for ``enumerate_mice``."""
    listing = {}
    for path in sorted(glob.glob(os.path.join(root, "*", "product"))):
        try:
            with open(path) as fh:
                listing[os.path.basename(os.path.dirname(path))] = fh.read().strip()
        except OSError:
            continue
    return listing


def set_light(handle: EmitterHandle, state: LightState, at: int) -> int:
    """Time at which the light actually reaches ``state`` when commanded at ``at``."""
    return at + handle.latency(LightState(state))


@dataclass
class SimEmitter:
    """Emitter that records its commands instead of touching hardware."""

    handle: EmitterHandle
    commands: list[tuple[int, LightState, int]] = field(default_factory=list)
    gone: bool = False

    def set_light(self, state: LightState, at: int) -> int:
        if self.gone:
            raise DeviceGone(f"device {self.handle.device_id} disappeared")
        if self.commands and at < self.commands[-1][0]:
            raise ValueError(f"command at {at} ms precedes previous at {self.commands[-1][0]} ms")
        effective = set_light(self.handle, state, at)
        self.commands.append((at, LightState(state), effective))
        return effective


class SysfsEmitter:
    """Toggle a USB mouse by writing its id to the usb driver's bind/unbind files."""

    def __init__(self, handle: EmitterHandle, driver_dir: str = SYSFS_DRIVER):
        self.handle = handle
        self.driver_dir = driver_dir

    def path_for(self, state: LightState) -> str:
        return os.path.join(self.driver_dir, "bind" if state == LightState.ON else "unbind")

    def set_light(self, state: LightState, at: int) -> int:
        path = self.path_for(LightState(state))
        try:
            with open(path, "w") as fh:
                fh.write(self.handle.device_id)
        except PermissionError as exc:
            raise PermissionDenied(f"cannot write {path}: {exc.strerror}") from exc
        except FileNotFoundError as exc:
            raise DeviceGone(f"{path} does not exist") from exc
        except OSError as exc:
            if exc.errno in (errno.ENODEV, errno.ENOENT, errno.EINVAL):
                raise DeviceGone(f"device {self.handle.device_id}: {exc.strerror}") from exc
            raise
        return set_light(self.handle, state, at)


class PacketReader:
    """Split a raw octet stream into 3-octet movement packets.

    Leftover octets are held until the next ``feed``.
    """

    def __init__(self):
        self._pending = bytearray()

    @property
    def pending(self) -> int:
        return len(self._pending)

    def feed(self, data: bytes, at: int) -> list[MovementPacket]:
        self._pending.extend(data)
        whole = len(self._pending) - len(self._pending) % PACKET_SIZE
        chunk, self._pending = bytes(self._pending[:whole]), self._pending[whole:]
        return [MovementPacket.from_bytes(chunk[i:i + PACKET_SIZE], at)
                for i in range(0, whole, PACKET_SIZE)]


def read_movements(chunks: Iterable[tuple[int, bytes]]) -> Iterator[MovementPacket]:
    """Packets from timestamped raw reads ``(at_ms, octets)``.

    An empty read is a stall and yields nothing. Trailing octets that never
    complete a packet are dropped when the source ends.
    """
    reader = PacketReader()
    for at, data in chunks:
        yield from reader.feed(data, at)


class DevInputMice:
    """Non-blocking reader over ``/dev/input/mice`` (or any byte device).

    ``poll`` never blocks: an unbound mouse writes nothing, which shows up as
    an empty list rather than a hung read.
    """

    def __init__(self, path: str = DEV_INPUT_MICE, clock=None):
        self.path = path
        self.clock = clock or WallClock()
        self.reader = PacketReader()
        try:
            self._fd = os.open(path, os.O_RDONLY | os.O_NONBLOCK)
        except PermissionError as exc:
            raise PermissionDenied(f"cannot read {path}: {exc.strerror}") from exc
        except FileNotFoundError as exc:
            raise NoMouseFound(f"{path} does not exist") from exc

    def poll(self) -> list[MovementPacket]:
        if self._fd is None:
            raise SourceClosed(self.path)
        data = bytearray()
        while select.select([self._fd], [], [], 0)[0]:
            try:
                chunk = os.read(self._fd, 4096)
            except BlockingIOError:
                break
            if not chunk:
                self.close()
                raise SourceClosed(f"{self.path} reached end of stream")
            data.extend(chunk)
        return self.reader.feed(bytes(data), self.clock.now)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


def relay_movements(src: str = DEV_INPUT_MICE, dst: str = "mouse_data.txt") -> None:
    """Copy raw packets from ``src`` to ``dst`` forever; Ctrl-C truncates ``dst``.

    A separate process runs this so the receiver can poll ``dst`` without
    blocking on a mouse that has gone dark.
    """
    try:
        with open(src, "rb") as dev:
            while True:
                buf = dev.read(PACKET_SIZE)
                if not buf:
                    break
                with open(dst, "ab") as fh:
                    fh.write(buf)
    except KeyboardInterrupt:
        with open(dst, "wb"):
            pass


class RelayFileSource:
    """Poll the relay file; each poll returns the packets appended since the last."""

    def __init__(self, path: str = "mouse_data.txt", clock=None):
        self.path = path
        self.clock = clock or WallClock()
        self.reader = PacketReader()
        self._fh = open(path, "rb")
        self._fh.seek(0, os.SEEK_END)

    def poll(self) -> list[MovementPacket]:
        return self.reader.feed(self._fh.read(), self.clock.now)

    def close(self) -> None:
        self._fh.close()
