"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they happen; they are also collected into the terminal summary.
"""

import copy
import json
import re
import time
from collections import deque

import numpy as np

from mouselight import camdecode, codec
from mouselight.cli import main, run_sweep
from mouselight.link import LinkConfig, LinkReceiver, State, drive
from mouselight.modem import LightCommand, ModemConfig, PollSample, decide_bits, find_preamble, modulate, sample
from mouselight.phy import SimEmitter
from mouselight.simchannel import SessionFailed, get_profile, propagate, run_session


def _payload(rng, lo=1, hi=127) -> bytes:
    return bytes(rng.integers(0, 256, int(rng.integers(lo, hi + 1)), dtype=np.uint8))


# 1 ------------------------------------------------------------------------

def test_c1_round_trip_integrity(verdict):
    rng = np.random.default_rng(2024)
    profiles = [get_profile(n, p_detect=1.0, p_spurious=0.0) for n in ("linux-mouse", "torch")]
    failures = 0
    t0 = time.perf_counter()
    n = 1000
    for i in range(n):
        prof = profiles[i % 2]
        cfg = prof.modem
        payload = _payload(rng)
        bits = codec.encode_payload(payload)
        lead = int(rng.integers(0, 3 * cfg.samples_per_bit)) * cfg.poll_interval_ms
        # issue each command early by its latency so the light changes on the bit boundary
        sim = SimEmitter(prof.handle())
        issued = drive(sim, modulate(bits, cfg, lead))
        cmds = [LightCommand(at, c[1]) for at, c in zip(issued, sim.commands)]
        end = lead + len(bits) * cfg.bit_period_ms
        events = propagate(cmds, prof, seed=i, start=0, end=end)
        samples = sample(events, cfg, 0, end // cfg.poll_interval_ms)
        try:
            off = find_preamble(samples, cfg)
            got = codec.decode_frame(decide_bits(samples, cfg, start=off * cfg.poll_interval_ms))
        except codec.CodecError:
            got = None
        failures += got != payload
    elapsed = time.perf_counter() - t0
    verdict(1, "round-trip integrity", failures == 0 and elapsed < 30.0,
            f"{n} payloads of 1-127 octets, {failures} failures, {elapsed:.1f} s")


# 2 ------------------------------------------------------------------------

def _trace_raw_rate(trace) -> float:
    """Decoded bits over receiver-observed frame time, read back from the trace lines."""
    bits = span = 0
    for line in trace.to_lines():
        rec = json.loads(line)
        if rec["kind"] != "rx_frame":
            continue
        start = int(re.search(r"start=(\d+)", rec["detail"]).group(1))
        b = re.search(r"bits=([01]+)", rec["detail"]).group(1)
        bits += len(b)
        span += rec["time_ms"] - start
    return 1000.0 * bits / span


def test_c2_linux_rate(verdict):
    prof = get_profile("linux-mouse", p_detect=1.0, p_spurious=0.0)
    payload = bytes(np.random.default_rng(64).integers(0, 256, 64, dtype=np.uint8))
    trace, rep = run_session(payload, prof, seed=1)
    raw = _trace_raw_rate(trace)
    ok = rep.delivered and abs(raw - 0.50) <= 0.01 and abs(rep.raw_channel_rate_bps - 0.50) <= 0.01 \
        and rep.effective_throughput_bps >= 0.30
    verdict(2, "linux mouse-to-mouse rate", ok,
            f"raw {raw:.4f} bit/s from trace, report {rep.raw_channel_rate_bps:.4f}, "
            f"effective {rep.effective_throughput_bps:.4f} bit/s for 64 octets")


# 3 ------------------------------------------------------------------------

def test_c3_windows_ratio(verdict):
    payload = bytes(np.random.default_rng(3).integers(0, 256, 64, dtype=np.uint8))
    _, lin = run_session(payload, get_profile("linux-mouse"), seed=3)
    _, win = run_session(payload, get_profile("windows-mouse"), seed=3)
    ratio = win.effective_throughput_bps / lin.effective_throughput_bps
    verdict(3, "windows/linux throughput ratio", abs(ratio - 0.5) <= 0.05,
            f"windows {win.effective_throughput_bps:.4f} / linux {lin.effective_throughput_bps:.4f} "
            f"= {ratio:.4f}")


# 4 ------------------------------------------------------------------------

def test_c4_torch_rate(verdict):
    prof = get_profile("torch", p_detect=0.98, p_spurious=0.01)
    rates, worst, failed = [], 0, 0
    for seed in range(20):
        payload = bytes(np.random.default_rng(1000 + seed).integers(0, 256, 100, dtype=np.uint8))
        try:
            _, rep = run_session(payload, prof, seed=seed)
        except SessionFailed as exc:
            failed += 1
            rep = exc.report
        rates.append(rep.raw_channel_rate_bps)
        worst = max(worst, rep.max_retries_per_frame)
    ok = failed == 0 and all(abs(r - 10.0) <= 0.5 for r in rates) and worst <= 2
    verdict(4, "torch rate", ok,
            f"20 seeds x 100 octets, raw {min(rates):.2f}-{max(rates):.2f} bit/s, "
            f"max retries/frame {worst}, {failed} undelivered")


# 5 ------------------------------------------------------------------------

def _nonincreasing(xs):
    return all(b <= a + 1e-12 for a, b in zip(xs, xs[1:]))


def test_c5_range_cutoff_and_ber_monotone(verdict):
    torch = get_profile("torch")
    link = LinkConfig()
    _, dist = run_sweep("torch2mouse", torch, link, "distance_cm", list(range(0, 36, 5)), 50, seed=0)
    delivery = [r["delivery_rate"] for r in dist]
    cutoff = all(r["delivery_rate"] == 0 for r in dist if r["value"] >= 30)

    _, pd = run_sweep("torch2mouse", torch, link, "p_detect", [0.5, 0.6, 0.7, 0.8, 0.9], 50, seed=0)
    _, ps = run_sweep("torch2mouse", torch, link, "p_spurious", [0.0, 0.1, 0.2, 0.3, 0.4], 50, seed=0)
    ber_pd = [r["mean_ber"] for r in pd]
    ber_ps = [r["mean_ber"] for r in ps]
    ok = _nonincreasing(delivery) and cutoff and _nonincreasing(ber_pd) and _nonincreasing(ber_ps[::-1])
    verdict(5, "range cutoff and BER monotonicity", ok,
            f"delivery by 5 cm {delivery}; BER vs p_detect {ber_pd}; BER vs p_spurious {ber_ps}")


# 6 ------------------------------------------------------------------------

def test_c6_decoded_bits_replay(verdict, tmp_path, capsys):
    rep = tmp_path / "c6.json"
    code = main(["simulate", "--scenario", "mouse2mouse", "--payload-hex", "9B", "--seed", "4",
                 "--report", str(rep)])
    capsys.readouterr()
    doc = json.loads(rep.read_text())
    ok = code == 0 and doc["delivered"] and doc["received_hex"] == "9B" and doc["received_bits"] == "10011011"
    verdict(6, "decoded information 10011011", ok,
            f"exit {code}, received_bits {doc['received_bits']!r}")


# 7 ------------------------------------------------------------------------

def test_c7_camera_loop(verdict):
    rng = np.random.default_rng(77)
    fps, rate = 5.0, 0.5
    per_bit = camdecode.frames_per_bit(fps, rate)
    exact = flips = corrupt_fail = 0
    n = 200
    for i in range(n):
        payload = _payload(rng, 1, 16)
        bits = codec.encode_payload(payload, i & 1)
        lead = int(rng.integers(0, 3 * per_bit))
        onoff = camdecode.bits_to_onoff(bits, per_bit, lead, per_bit)
        frames = camdecode.render_onoff(onoff, (12, 16), 4)
        seen = [int(s) for s in camdecode.classify_frames(frames)]
        exact += camdecode.decode_onoff(seen, fps, rate) == [payload]

        # one corrupted frame in every bit group
        bad = frames.copy()
        for k in range(len(bits)):
            j = lead + k * per_bit + int(rng.integers(0, per_bit))
            bad[j] = camdecode.render_frame(not onoff[j], (12, 16), 4)
        seen_bad = [int(s) for s in camdecode.classify_frames(bad)]
        got = camdecode.frames_to_bits(seen_bad[lead:], fps, rate)[:len(bits)]
        flips += sum(a != b for a, b in zip(got, bits))
        corrupt_fail += camdecode.decode_onoff(seen_bad, fps, rate) != [payload]
    ok = exact == n and flips == 0 and corrupt_fail == 0
    verdict(7, "camera loop", ok,
            f"{exact}/{n} exact at {per_bit} frames/bit; single-frame corruption flipped {flips} bits, "
            f"{corrupt_fail} payloads lost")


# 8 ------------------------------------------------------------------------

MC_CFG = ModemConfig(200, 100)
MC_SPB = MC_CFG.samples_per_bit
MC_POLLS = 200
# per bit period: dark, lit, and a lit/dark split that sits right on the threshold
ALPHABET = ((0, 0), (1, 1), (1, 0))


def _clone(rx: LinkReceiver) -> LinkReceiver:
    c = copy.copy(rx)
    c.link = copy.copy(rx.link)
    c.link.history = []
    c.search = copy.copy(rx.search)
    c.search.buf = deque(rx.search.buf)
    c._frame = list(rx._frame) if rx._frame is not None else None
    c.frames, c.delivered, c.ack_times = [], [], []
    return c


def _frame_key(rx: LinkReceiver):
    # A frame in progress matters only through its length, its alignment, its sequence flag
    # and, near the end, the running checksum. While 18 or more decided bits remain, every
    # residue can still reach every outcome, so the residue is left out until then.
    f = rx._frame
    n = len(f)
    pending = tuple(f[n - n % MC_SPB:])
    bits = rx._bits(f[:n - n % MC_SPB])[8:]
    if len(bits) < 8:
        return ("header", n, pending, tuple(bits))
    remaining = rx._needed // MC_SPB - 8 - len(bits)
    residue = None
    if remaining <= 17:
        residue = 0
        for i, b in enumerate(bits):
            residue ^= b << (7 - i % 8)
    return ("body", rx._needed, n, pending, residue, bits[0])


def _mc_key(rx: LinkReceiver, monitor: str, now: int):
    idle = None
    if rx.state == State.CONNECTED and not rx.in_frame:
        idle = now - max(rx.link.last_activity, rx.busy_until)
    if rx.in_frame:
        # the search buffer is discarded when the frame ends
        return rx.state, None, _frame_key(rx), rx.last_seq, idle, monitor
    return rx.state, rx.state_key()[1], None, rx.last_seq, idle, monitor


def _model_check():
    violations = []
    stats = {"states": 0, "connects": 0, "deliveries": 0, "closes": 0}

    def step(rx, monitor, symbol, t):
        for m in symbol:
            before = rx.state
            rx.on_sample(PollSample(t, m))
            t += MC_CFG.poll_interval_ms
            if rx.state == State.CONNECTED and before != State.CONNECTED:
                stats["connects"] += 1
                if before != State.CONNECTING or not rx.in_frame or \
                        tuple(rx._bits(rx._frame[:8 * MC_SPB])) != codec.PREAMBLE_BITS:
                    violations.append(f"connected from {before.value} without a preamble at {t} ms")
                monitor = "connected"
            if rx.state == State.CLOSED and before != State.CLOSED:
                stats["closes"] += 1
                monitor = "closed"
            if rx.delivered:
                stats["deliveries"] += 1
                if monitor != "connected" or rx.state != State.CONNECTED:
                    violations.append(f"payload emitted while {rx.state.value} ({monitor}) at {t} ms")
                rx.delivered = []
        return monitor, t

    rx = LinkReceiver(MC_CFG, LinkConfig())
    seen = {_mc_key(rx, "idle", 0)}
    frontier = [(rx, "idle", 0)]
    polls = 0
    while frontier and polls + MC_SPB <= MC_POLLS:
        nxt = []
        for rx, monitor, t in frontier:
            stats["states"] += 1
            # a frame that cannot finish inside the budget only accumulates samples
            if rx.in_frame and rx._needed > 16 * MC_SPB and polls + rx._needed - len(rx._frame) > MC_POLLS:
                continue
            for symbol in ALPHABET:
                child = _clone(rx)
                m2, t2 = step(child, monitor, symbol, t)
                key = _mc_key(child, m2, t2)
                if key not in seen:
                    seen.add(key)
                    nxt.append((child, m2, t2))
        frontier = nxt
        polls += MC_SPB
    stats["depth"] = polls
    return violations, stats


def _ack_scenarios():
    prof = get_profile("linux-mouse", p_detect=1.0, p_spurious=0.0, bit_period_ms=200, poll_interval_ms=100,
                       off_latency_ms=0)
    out = {}
    for name, faults in (("drop-first", {0: "drop"}), ("drop-all", lambda i: "drop"),
                         ("corrupt-first", {0: "corrupt"})):
        try:
            _, rep = run_session(b"ack me", prof, seed=5, faults=faults)
        except SessionFailed as exc:
            rep = exc.report
        delivered_frames = 1 if rep.delivered else 0
        out[name] = (rep.acks_sent, delivered_frames, rep.attempts)
    return out


def test_c8_link_fsm_safety(verdict):
    violations, stats = _model_check()
    acks = _ack_scenarios()
    one_ack = all(a == d for a, d, _ in acks.values())
    ok = not violations and one_ack and stats["connects"] > 0 and stats["deliveries"] > 0 and stats["closes"] > 0
    detail = (f"{stats['states']} distinct states, reachable set closed after {stats['depth']} of {MC_POLLS} polls, "
              f"{stats['connects']} connects, {stats['deliveries']} deliveries, {stats['closes']} closes, "
              f"{len(violations)} violations; ACKs/delivered/attempts {acks}")
    if violations:
        detail += f"; first: {violations[0]}"
    verdict(8, "link FSM safety", ok, detail)


# 9 ------------------------------------------------------------------------

def test_c9_determinism(verdict, tmp_path, capsys):
    runs = [
        ["--scenario", "mouse2mouse", "--payload-hex", "DEADBEEF", "--seed", "11"],
        ["--scenario", "torch2mouse", "--random-len", "40", "--seed", "12", "--p-detect", "0.9"],
        ["--scenario", "mouse2camera", "--payload-hex", "C0FFEE", "--seed", "13"],
        ["--scenario", "torch2mouse", "--payload-hex", "00", "--p-detect", "0", "--p-spurious", "0.5"],
    ]
    identical = 0
    for k, argv in enumerate(runs):
        outputs = []
        for rep_no in range(2):
            rep, tr = tmp_path / f"r{k}_{rep_no}.json", tmp_path / f"t{k}_{rep_no}.jsonl"
            main(["simulate", *argv, "--report", str(rep), "--trace", str(tr)])
            outputs.append((rep.read_bytes(), tr.read_bytes()))
        identical += outputs[0] == outputs[1]
    capsys.readouterr()
    verdict(9, "determinism", identical == len(runs),
            f"{identical}/{len(runs)} invocations byte-identical in report and trace")
