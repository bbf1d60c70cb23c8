import os

import pytest

from mouselight import phy
from mouselight.phy import (DeviceGone, EmitterHandle, LightState, MovementPacket, NoMouseFound,
                            PacketReader, PermissionDenied, SimEmitter, SysfsEmitter, VirtualClock)


def test_light_state_names():
    assert str(LightState.ON) == "ON" and int(LightState.OFF) == 0


def test_packet_signed_deltas():
    p = MovementPacket.from_bytes(bytes([0x08, 0xFF, 0x02]), at=7)
    assert p == MovementPacket(7, 0x08, -1, 2)
    assert p.to_bytes() == bytes([0x08, 0xFF, 0x02])
    assert MovementPacket.from_bytes(bytes([0x08, 0x80, 0x7F]), 0)[2:] == (-128, 127)


def test_reader_holds_partial_packets():
    r = PacketReader()
    assert r.feed(b"\x08\x01", 10) == []
    assert r.pending == 2
    got = r.feed(b"\x02\x08\x03\x04\x09", 20)
    assert [(p.dx, p.dy) for p in got] == [(1, 2), (3, 4)]
    assert r.pending == 1


def test_read_movements_drops_trailing_fragment():
    chunks = [(0, b"\x08\x01\x01\x08"), (5, b"\x02\x02\x08")]
    assert [p.at for p in phy.read_movements(chunks)] == [0, 5]


def test_enumerate_mice():
    listing = {"1-1": "USB Keyboard", "1-2": "Logitech USB Optical Mouse", "1-3": "Generic MOUSE"}
    handles = phy.enumerate_mice(listing)
    assert [h.device_id for h in handles] == ["1-2", "1-3"]
    assert phy.enumerate_mice(listing, "logitech")[0].product == "Logitech USB Optical Mouse"
    with pytest.raises(NoMouseFound):
        phy.enumerate_mice({"1-1": "USB Keyboard"})
    with pytest.raises(NoMouseFound):
        phy.enumerate_mice(listing, "razer")


def test_discover_mice(tmp_path):
    for dev, product in (("1-2", "Optical Mouse\n"), ("2-1", "Hub\n")):
        (tmp_path / dev).mkdir()
        (tmp_path / dev / "product").write_text(product)
    (tmp_path / "usb1").mkdir()
    assert phy.discover_mice(str(tmp_path)) == {"1-2": "Optical Mouse", "2-1": "Hub"}


def test_handle_latency():
    h = EmitterHandle("x", 10, 2000)
    assert h.latency(LightState.ON) == 10 and h.latency(LightState.OFF) == 2000
    assert phy.set_light(h, LightState.OFF, 100) == 2100
    with pytest.raises(ValueError):
        EmitterHandle("x", -1, 0)


def test_virtual_clock():
    c = VirtualClock(5)
    c.advance(10)
    c.sleep_until(100)
    assert c.now == 100
    c.sleep_until(50)
    assert c.now == 100


def test_sim_emitter_gone():
    em = SimEmitter(EmitterHandle("x"))
    em.set_light(LightState.ON, 0)
    em.gone = True
    with pytest.raises(DeviceGone):
        em.set_light(LightState.OFF, 10)


def test_sysfs_emitter_writes_bind_unbind(tmp_path):
    (tmp_path / "bind").write_text("")
    (tmp_path / "unbind").write_text("")
    em = SysfsEmitter(EmitterHandle("1-2", 0, 100), str(tmp_path))
    assert em.set_light(LightState.OFF, 0) == 100
    assert (tmp_path / "unbind").read_text() == "1-2"
    em.set_light(LightState.ON, 200)
    assert (tmp_path / "bind").read_text() == "1-2"


def test_sysfs_emitter_missing_driver(tmp_path):
    em = SysfsEmitter(EmitterHandle("1-2"), str(tmp_path / "nope"))
    with pytest.raises(DeviceGone):
        em.set_light(LightState.ON, 0)


def test_sysfs_permission_denied(tmp_path, monkeypatch):
    import builtins

    def deny(path, *a, **kw):
        raise PermissionError(13, "Permission denied", path)

    em = SysfsEmitter(EmitterHandle("1-2"), str(tmp_path))
    monkeypatch.setattr(builtins, "open", deny)
    with pytest.raises(PermissionDenied, match="bind"):
        em.set_light(LightState.ON, 0)


def test_dev_input_reader_on_fifo(tmp_path):
    path = tmp_path / "mice"
    os.mkfifo(path)
    clock = VirtualClock(0)
    src = phy.DevInputMice(str(path), clock)
    w = os.open(path, os.O_WRONLY)
    try:
        assert src.poll() == []
        os.write(w, b"\x08\x01\x02\x08")
        clock.advance(100)
        got = src.poll()
        assert [(p.at, p.dx, p.dy) for p in got] == [(100, 1, 2)]
    finally:
        os.close(w)
    with pytest.raises(phy.SourceClosed):
        src.poll()


def test_dev_input_missing():
    with pytest.raises(NoMouseFound):
        phy.DevInputMice("/nonexistent/mice")


def test_relay_file_source(tmp_path):
    f = tmp_path / "mouse_data.txt"
    f.write_bytes(b"\x08\x01\x01")
    src = phy.RelayFileSource(str(f), VirtualClock(0))
    assert src.poll() == []
    with open(f, "ab") as fh:
        fh.write(b"\x08\x02\x02")
    assert len(src.poll()) == 1
    src.close()
