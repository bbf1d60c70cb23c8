"""Command line entry point.

Exit status: 0 delivered / success, 1 delivery failure, 2 usage or input
error, 3 device error. Errors print one line on stderr of the form
``mouselight: error[<Kind>]: <message>``.

Profile settings are layered: built-in profile, then the JSON config file
(``--config`` or ``$MOUSELIGHT_CONFIG``), then command-line flags. A
report written by ``simulate`` is itself a valid config file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__, camdecode, codec, live, phy
from .errors import MouselightError, UsageError
from .link import LinkConfig
from .modem import ModemConfig
from .simchannel import (PRNG, ChannelProfile, ChannelTrace, DeliveryReport, SessionFailed,
                         get_profile, run_session)

REPORT_SCHEMA = "mouselight.report/1"
CONFIG_ENV = "MOUSELIGHT_CONFIG"

SCENARIO_PROFILES = {
    "mouse2mouse": "linux-mouse",
    "torch2mouse": "torch",
    "mouse2camera": "camera",
}

PROFILE_FLAGS = {
    "p_detect": float,
    "p_spurious": float,
    "on_latency_ms": int,
    "off_latency_ms": int,
    "poll_interval_ms": int,
    "bit_period_ms": int,
    "distance_cm": float,
    "d_max_cm": float,
}
LINK_FLAGS = {"max_retries": int, "idle_timeout_bits": int}
SWEEP_AXES = ("p_detect", "p_spurious", "distance_cm", "bit_period_ms")

log = logging.getLogger("mouselight")


class ArgumentError(UsageError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def resolve_profile(args, config: dict, default: str) -> ChannelProfile:
    snapshot = dict(config.get("profile") or {})
    name = args.profile or snapshot.pop("name", None) or default
    snapshot.pop("name", None)
    overrides = {k: v for k, v in snapshot.items()}
    for key in PROFILE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return get_profile(name, **overrides)


def resolve_link(args, config: dict) -> LinkConfig:
    fields = {k: v for k, v in (config.get("link") or {}).items() if k in LINK_FLAGS}
    for key in LINK_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            fields[key] = value
    try:
        return LinkConfig(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def resolve_payload(args) -> bytes:
    if args.payload_hex is not None:
        try:
            return bytes.fromhex(args.payload_hex)
        except ValueError as exc:
            raise UsageError(f"bad --payload-hex: {exc}") from exc
    if args.payload_file is not None:
        try:
            with open(args.payload_file, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read {args.payload_file}: {exc.strerror}") from exc
    if args.random_len < 0:
        raise UsageError("--random-len must be >= 0")
    return random_payload(args.random_len, args.seed)


def random_payload(length: int, seed: int) -> bytes:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xDA7A])))
    return bytes(rng.integers(0, 256, length, dtype=np.uint8))


def _bits_text(data: bytes) -> str:
    return " ".join(codec.bits_to_str(codec.octet_to_bits(b)) for b in data)


def build_report(scenario: str, profile: ChannelProfile, link_cfg: LinkConfig,
                 report: DeliveryReport, seed: int) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "scenario": scenario,
        "profile": profile.to_dict(),
        "link": {"idle_timeout_bits": link_cfg.idle_timeout_bits, "max_retries": link_cfg.max_retries},
        "seed": seed,
        "prng": PRNG,
        "delivered": report.delivered,
        "failure": report.failure,
        "sent_octets": len(report.sent),
        "sent_hex": report.sent.hex().upper(),
        "received_octets": len(report.received),
        "received_hex": report.received.hex().upper(),
        "received_bits": _bits_text(report.received),
        "raw_ber": round(report.raw_ber, 9),
        "raw_bit_errors": report.raw_bit_errors,
        "raw_bits": report.raw_bits,
        "retries": report.retries,
        "max_retries_per_frame": report.max_retries_per_frame,
        "attempts": report.attempts,
        "acks_sent": report.acks_sent,
        "raw_channel_rate_bps": round(report.raw_channel_rate_bps, 9),
        "effective_throughput_bps": round(report.effective_throughput_bps, 9),
        "virtual_duration_ms": report.duration_ms,
    }


def dump_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def simulate_once(scenario: str, profile: ChannelProfile, link_cfg: LinkConfig, payload: bytes,
                  seed: int) -> tuple[DeliveryReport, ChannelTrace, str | None]:
    if scenario == "mouse2camera":
        if profile.receiver != "camera":
            raise UsageError(f"scenario mouse2camera needs a camera profile, not {profile.name}")
        runner = camdecode.run_camera_session
    else:
        if profile.receiver != "mouse":
            raise UsageError(f"scenario {scenario} needs a mouse receiver, not {profile.name}")
        runner = run_session
    try:
        trace, report = runner(payload, profile, seed, link_cfg)
        return report, trace, None
    except SessionFailed as exc:
        return exc.report, exc.trace, exc.reason


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    scenario = args.scenario
    profile = resolve_profile(args, config, SCENARIO_PROFILES[scenario])
    link_cfg = resolve_link(args, config)
    payload = resolve_payload(args)
    report, trace, failure = simulate_once(scenario, profile, link_cfg, payload, args.seed)
    doc = build_report(scenario, profile, link_cfg, report, args.seed)
    _write(args.report, dump_report(doc))
    if args.trace:
        with open(args.trace, "w") as fh:
            trace.write(fh, {"delivered": report.delivered, "scenario": scenario})
    if failure is not None or not report.delivered:
        _diag("SessionFailed", f"session failed: {failure or 'not_received'}")
        return 1
    return 0


def _parse_windows(items: Sequence[str] | None):
    if not items:
        return camdecode.MaskConfig.hue_windows
    windows = []
    for item in items:
        try:
            lo, hi = (float(x) for x in item.split(":"))
        except ValueError:
            raise UsageError(f"hue window {item!r} must look like LO:HI") from None
        windows.append((lo, hi))
    return tuple(windows)


def cmd_decode_frames(args) -> int:
    try:
        mask = camdecode.MaskConfig(
            hue_windows=_parse_windows(args.hue_window),
            min_saturation=args.min_saturation, min_value=args.min_value,
            on_fraction=args.on_fraction,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    camdecode.frames_per_bit(args.fps, args.bit_rate)
    frames = camdecode.read_frames(args.directory, args.fps)
    records = camdecode.classification_log(frames, mask)
    onoff = [1 if r["state"] == "ON" else 0 for r in records]
    if args.framing == "framed":
        payload, mode = b"".join(camdecode.decode_onoff(onoff, args.fps, args.bit_rate)), "framed"
    elif args.framing == "raw":
        bits = camdecode.frames_to_bits(onoff, args.fps, args.bit_rate)
        payload, mode = codec.bits_to_bytes(bits[:len(bits) - len(bits) % 8]), "raw"
    else:
        payload, mode = camdecode.decode_auto(onoff, args.fps, args.bit_rate)
    log_path = args.log or os.path.join(args.directory, "classification.jsonl")
    with open(log_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"kind": "summary", "frames": len(records), "mode": mode,
                             "payload_hex": payload.hex().upper()}, sort_keys=True) + "\n")
    sys.stdout.write(payload.hex().upper() + "\n")
    return 0


def sweep_values(args) -> list[float]:
    if args.values:
        try:
            return [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad --values {args.values!r}") from None
    if args.start is None or args.stop is None or args.step is None:
        raise UsageError("give --values or all of --start/--stop/--step")
    if args.step <= 0 or args.stop < args.start:
        raise UsageError("sweep range must satisfy start <= stop and step > 0")
    n = int(np.floor((args.stop - args.start) / args.step + 1e-9)) + 1
    return [round(args.start + i * args.step, 12) for i in range(n)]


def _sweep_row(job):
    scenario, profile, link_cfg, payload_len, axis, value, seed = job
    value = int(value) if PROFILE_FLAGS[axis] is int else value
    prof = profile.replace(**{axis: value})
    payload = random_payload(payload_len, seed)
    report, _, _ = simulate_once(scenario, prof, link_cfg, payload, seed)
    return {
        "axis": axis, "value": value, "seed": seed,
        "delivered": int(report.delivered), "raw_ber": round(report.raw_ber, 9),
        "retries": report.retries,
        "effective_throughput_bps": round(report.effective_throughput_bps, 9),
    }


def run_sweep(scenario: str, profile: ChannelProfile, link_cfg: LinkConfig, axis: str,
              values: Sequence[float], repetitions: int, seed: int, payload_len: int = 4,
              jobs: int = 1) -> tuple[list[dict], list[dict]]:
    if axis not in SWEEP_AXES:
        raise UsageError(f"cannot sweep {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    work = [(scenario, profile, link_cfg, payload_len, axis, v, seed + r)
            for v in values for r in range(repetitions)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_row, work))
    else:
        rows = [_sweep_row(w) for w in work]
    rows.sort(key=lambda r: (r["value"], r["seed"]))
    summary = []
    for v in values:
        v = int(v) if PROFILE_FLAGS[axis] is int else v
        mine = [r for r in rows if r["value"] == v]
        summary.append({
            "axis": axis, "value": v, "runs": len(mine),
            "mean_ber": round(float(np.mean([r["raw_ber"] for r in mine])), 9),
            "delivery_rate": round(float(np.mean([r["delivered"] for r in mine])), 9),
        })
    return rows, summary


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    profile = resolve_profile(args, config, SCENARIO_PROFILES[args.scenario])
    link_cfg = resolve_link(args, config)
    values = sweep_values(args)
    if args.payload_len < 0:
        raise UsageError("--payload-len must be >= 0")
    rows, summary = run_sweep(args.scenario, profile, link_cfg, args.axis, values,
                              args.repetitions, args.seed, args.payload_len, args.jobs)
    if args.out:
        _write(args.out, _csv(rows))
        sys.stdout.write(_csv(summary))
    else:
        sys.stdout.write(_csv(rows) + "\n" + _csv(summary))
    return 0


def cmd_live(args) -> int:
    if args.role == "send" and args.payload_hex is None:
        raise UsageError("live send needs --payload-hex")
    listing = phy.discover_mice(args.sysfs_root)
    handle = phy.enumerate_mice(listing, args.device_pattern, args.on_latency_ms or 0,
                                args.off_latency_ms or 0)[0]
    modem_cfg = ModemConfig(args.bit_period_ms or 2000, args.poll_interval_ms or 100)
    link_cfg = LinkConfig(**{k: getattr(args, k) for k in LINK_FLAGS if getattr(args, k) is not None})
    emitter = phy.SysfsEmitter(handle, args.driver_dir)
    clock = phy.WallClock()
    if args.role == "send" or not args.one_way:
        for state in (phy.LightState.ON, phy.LightState.OFF):
            path = emitter.path_for(state)
            if not os.access(path, os.W_OK):
                raise phy.PermissionDenied(f"cannot write {path}")
    if args.role == "send":
        payload = bytes.fromhex(args.payload_hex)
        source = None if args.one_way else phy.DevInputMice(args.input, clock)
        result = live.send(payload, emitter, source, modem_cfg, clock, link_cfg)
    else:
        source = phy.DevInputMice(args.input, clock)
        ack = None if args.one_way else emitter
        result = live.receive(source, ack, modem_cfg, clock, link_cfg, int(args.timeout_s * 1000))
    doc = {
        "schema": REPORT_SCHEMA, "scenario": f"live-{result.role}", "device_id": handle.device_id,
        "product": handle.product, "delivered": result.delivered, "failure": result.failure,
        "payload_hex": result.payload.hex().upper(), "received_bits": _bits_text(result.payload),
        "attempts": result.attempts, "acks": result.acks, "duration_ms": result.duration_ms,
    }
    _write(args.report, dump_report(doc))
    return 0 if result.delivered else 1


def cmd_render_frames(args) -> int:
    payload = bytes.fromhex(args.payload_hex)
    n = camdecode.frames_per_bit(args.fps, args.bit_rate)
    bits = codec.bytes_to_bits(payload) if args.raw else codec.encode_payload(payload, 0)
    onoff = camdecode.bits_to_onoff(bits, n, args.lead_frames, args.tail_frames)
    try:
        w, h = (int(x) for x in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size {args.size!r} must look like WxH") from None
    frames = camdecode.render_onoff(onoff, (h, w), args.square)
    camdecode.write_frames(args.out, frames)
    sys.stdout.write(f"{len(frames)}\n")
    return 0


def _add_profile_flags(p, with_profile=True):
    if with_profile:
        p.add_argument("--profile", help="built-in channel profile")
    for key, typ in PROFILE_FLAGS.items():
        p.add_argument(_flag(key), dest=key, type=typ, default=None)
    for key, typ in LINK_FLAGS.items():
        p.add_argument(_flag(key), dest=key, type=typ, default=None)
    p.add_argument("--config", help=f"JSON config file (default ${CONFIG_ENV})")


def build_parser() -> Parser:
    parser = Parser(prog="mouselight", description="Optical-mouse covert channel toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser,
                                metavar="{simulate,decode-frames,sweep,live}")

    p = sub.add_parser("simulate", help="run one simulated scenario")
    p.add_argument("--scenario", required=True, choices=sorted(SCENARIO_PROFILES))
    _add_profile_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--payload-hex")
    src.add_argument("--payload-file")
    src.add_argument("--random-len", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="report path (default stdout)")
    p.add_argument("--trace", help="write line-delimited trace records here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decode-frames", help="decode a directory of PPM frames")
    p.add_argument("directory")
    p.add_argument("--fps", type=float, default=5.0)
    p.add_argument("--bit-rate", type=float, default=0.5)
    p.add_argument("--hue-window", action="append", help="LO:HI on the 0-180 hue scale; repeatable")
    p.add_argument("--min-saturation", type=float, default=camdecode.MaskConfig.min_saturation)
    p.add_argument("--min-value", type=float, default=camdecode.MaskConfig.min_value)
    p.add_argument("--on-fraction", type=float, default=camdecode.MaskConfig.on_fraction)
    p.add_argument("--framing", choices=("auto", "framed", "raw"), default="auto")
    p.add_argument("--log", help="classification log path (default DIR/classification.jsonl)")
    p.set_defaults(func=cmd_decode_frames)

    p = sub.add_parser("sweep", help="repeat simulations across one profile axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--scenario", choices=sorted(SCENARIO_PROFILES), default="torch2mouse")
    _add_profile_flags(p)
    p.add_argument("--payload-len", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="per-run rows as CSV (summary still goes to stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("live", help="drive a real mouse through sysfs and /dev/input/mice")
    p.add_argument("--role", required=True, choices=("send", "recv"))
    p.add_argument("--device-pattern")
    p.add_argument("--payload-hex")
    p.add_argument("--one-way", action="store_true", help="no ACK path")
    p.add_argument("--sysfs-root", default=phy.SYSFS_DEVICES)
    p.add_argument("--driver-dir", default=phy.SYSFS_DRIVER)
    p.add_argument("--input", default=phy.DEV_INPUT_MICE)
    p.add_argument("--timeout-s", type=float, default=600.0)
    p.add_argument("--report")
    for key in ("bit_period_ms", "poll_interval_ms", "on_latency_ms", "off_latency_ms"):
        p.add_argument(_flag(key), dest=key, type=int, default=None)
    for key, typ in LINK_FLAGS.items():
        p.add_argument(_flag(key), dest=key, type=typ, default=None)
    p.set_defaults(func=cmd_live)

    p = sub.add_parser("render-frames")
    p.add_argument("--payload-hex", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=5.0)
    p.add_argument("--bit-rate", type=float, default=0.5)
    p.add_argument("--raw", action="store_true", help="payload bits only, no framing")
    p.add_argument("--lead-frames", type=int, default=0)
    p.add_argument("--tail-frames", type=int, default=0)
    p.add_argument("--size", default="64x48")
    p.add_argument("--square", type=int, default=8)
    p.set_defaults(func=cmd_render_frames)
    return parser


def _diag(kind: str, message: str) -> None:
    first = str(message).strip().splitlines()[0] if str(message).strip() else kind
    sys.stderr.write(f"mouselight: error[{kind}]: {first}\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ArgumentError as exc:
        _diag("UsageError", str(exc))
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except MouselightError as exc:
        _diag(exc.kind, str(exc))
        return exc.exit_code
    except ValueError as exc:
        _diag("UsageError", str(exc))
        return 2
    except OSError as exc:
        _diag("OSError", str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
