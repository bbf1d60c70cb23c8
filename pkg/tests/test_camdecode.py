import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mouselight import camdecode, codec
from mouselight.camdecode import (DimensionMismatch, EmptyDirectory, MaskConfig, RateMismatch,
                                  bits_to_onoff, decode_auto, decode_onoff, frames_per_bit,
                                  frames_to_bits, red_mask)
from mouselight.modem import NotFound
from mouselight.phy import LightState
from mouselight.simchannel import PROFILES


def hsv_oracle(rgb, cfg=MaskConfig()):
    r, g, b = (c / 255 for c in rgb)
    h, s, v = colorsys.rgb_to_hsv(r, g, b)
    h *= 180
    in_hue = any(lo <= h <= hi for lo, hi in cfg.hue_windows)
    return in_hue and s >= cfg.min_saturation and v >= cfg.min_value


def test_red_mask_matches_colorsys():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)
    px[0, :4] = [(255, 0, 0), (200, 10, 30), (30, 200, 10), (255, 255, 255)]
    mask = red_mask(px)
    want = np.array([[hsv_oracle(p) for p in row] for row in px])
    assert (mask == want).all()
    assert mask[0, 0] and mask[0, 1] and not mask[0, 2] and not mask[0, 3]


def test_frames_per_bit():
    assert frames_per_bit(5, 0.5) == 10
    with pytest.raises(RateMismatch):
        frames_per_bit(5, 0.3)
    with pytest.raises(RateMismatch):
        frames_per_bit(0, 1)


def test_majority_vote_tie_goes_to_one():
    onoff = [1] * 5 + [0] * 5 + [1] * 4 + [0] * 6 + [1, 1, 1]
    assert frames_to_bits(onoff, 5, 0.5) == [1, 0]
    assert frames_to_bits(onoff, 5, 0.5, tie_to_one=False) == [0, 0]


def test_classify_rendered_frames():
    frames = camdecode.render_onoff([1, 0, 1])
    assert camdecode.classify_frames(frames) == [LightState.ON, LightState.OFF, LightState.ON]


def test_dimension_mismatch():
    frames = [np.zeros((4, 4, 3), np.uint8), np.zeros((5, 4, 3), np.uint8)]
    with pytest.raises(DimensionMismatch):
        camdecode.red_fractions(frames)


def test_decode_onoff_multiple_frames():
    bits = codec.encode_payload(b"ab", 0) + [0] * 3 + codec.encode_payload(b"c", 1)
    onoff = bits_to_onoff(bits, 10, lead=7, tail=4)
    assert decode_onoff(onoff, 5, 0.5) == [b"ab", b"c"]


def test_decode_auto_falls_back_to_raw():
    onoff = bits_to_onoff(codec.octet_to_bits(0x9B), 10)
    assert decode_auto(onoff, 5, 0.5) == (b"\x9b", "raw")
    with pytest.raises(NotFound):
        decode_onoff(onoff, 5, 0.5)


def test_ppm_round_trip(tmp_path):
    onoff = bits_to_onoff(codec.encode_payload(b"Hi", 0), 10, lead=3)
    camdecode.write_frames(str(tmp_path), camdecode.render_onoff(onoff, (12, 16), 4))
    frames = camdecode.read_frames(str(tmp_path), fps=5)
    assert frames[1].timestamp_ms == pytest.approx(200)
    got = [int(s) for s in camdecode.classify_frames(frames)]
    assert got == onoff
    assert decode_onoff(got, 5, 0.5) == [b"Hi"]


def test_read_frames_sorted_numerically(tmp_path):
    from PIL import Image
    for i, lit in ((10, 1), (2, 0), (1, 1)):
        Image.fromarray(camdecode.render_frame(bool(lit), (8, 8), 4)).save(tmp_path / f"f{i}.ppm")
    frames = camdecode.read_frames(str(tmp_path))
    assert [f.source.split("/")[-1] for f in frames] == ["f1.ppm", "f2.ppm", "f10.ppm"]


def test_read_frames_errors(tmp_path):
    with pytest.raises(EmptyDirectory):
        camdecode.read_frames(str(tmp_path))
    from PIL import Image
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "a1.ppm")
    Image.fromarray(np.zeros((9, 8, 3), np.uint8)).save(tmp_path / "a2.ppm")
    with pytest.raises(DimensionMismatch, match="a2.ppm"):
        camdecode.read_frames(str(tmp_path))


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=1, max_size=12), st.integers(0, 25), st.data())
def test_single_frame_corruption_per_bit_never_flips(payload, lead, data):
    bits = codec.encode_payload(payload, 0)
    onoff = bits_to_onoff(bits, 10, lead=lead, tail=5)
    for k in range(len(bits)):
        i = lead + 10 * k + data.draw(st.integers(0, 9))
        onoff[i] ^= 1
    assert frames_to_bits(onoff[lead:], 5, 0.5)[:len(bits)] == bits
    assert decode_onoff(onoff, 5, 0.5) == [payload]


def test_camera_session():
    trace, rep = camdecode.run_camera_session(b"cam", PROFILES["camera"].replace(p_detect=1.0, p_spurious=0.0), 4)
    assert rep.delivered and rep.received == b"cam"
    assert rep.raw_channel_rate_bps == pytest.approx(0.5)
