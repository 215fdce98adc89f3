"""tagstream command line: find, send, relay, monitor, bench.

One executable covers every role a container might run. Data (monitor
lines, bench CSV) goes to stdout; logs and periodic relay stats go to
stderr, so pipelines compose.

Configuration precedence, highest first: command-line flags, TSRM_*
environment variables, --config key=value file, built-in defaults.
Exit codes: 0 success, 1 runtime error, 2 usage error / nothing found.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time

from . import bench as bench_mod
from . import transport
from .discovery import Finder
from .relay import Relay, RelayConfig, parse_source
from .sources import parse_signal_spec, read_wav_file, render, play
from .tagging import NotTagMetadata, ParseError, make_tagger, parse_metadata_xml
from .transport import ConnectError, Receiver, Sender
from .windowing import WindowConfig

logger = logging.getLogger("tagstream")

_ENV_PREFIX = "TSRM_"


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            values[key.strip()] = value.strip()
    return values


class Layered:
    """flags > environment > config file > defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, default=None, cast=str):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        env = os.environ.get(_ENV_PREFIX + key.upper())
        if env is not None:
            return cast(env)
        if key in self.file_values:
            return cast(self.file_values[key])
        return default


def _install_stop_handlers(on_stop) -> dict:
    previous = {}
    for signum in (signal.SIGINT, signal.SIGTERM):
        previous[signum] = signal.signal(signum, lambda *_: on_stop())
    return previous


def _restore_handlers(previous: dict) -> None:
    for signum, handler in previous.items():
        signal.signal(signum, handler)


def cmd_find(args: argparse.Namespace) -> int:
    layered = Layered(args)
    port = layered.get("discovery_port", None, int)
    seen = {}
    with Finder(port=port) as finder:
        deadline = time.monotonic() + args.timeout
        while time.monotonic() < deadline:
            for ad in finder.poll():
                seen[ad.key] = ad
            time.sleep(0.1)
    for (group, name) in sorted(seen):
        ad = seen[(group, name)]
        print(f"{group}/{name} {ad.host}:{ad.port}")
    return 0 if seen else 2


def cmd_send(args: argparse.Namespace) -> int:
    layered = Layered(args)
    if args.wav:
        try:
            clip = read_wav_file(args.wav)
        except OSError as exc:
            logger.error("cannot read %s: %s", args.wav, exc)
            return 1
        except Exception as exc:
            logger.error("cannot decode %s: %s", args.wav, exc)
            return 1
        samples, rate = clip.samples, clip.sample_rate_hz
    else:
        spec = parse_signal_spec(
            args.signal,
            duration_s=args.seconds,
            sample_rate_hz=args.rate,
            channels=args.channels,
        )
        samples, rate = render(spec), args.rate
    sender = Sender(
        args.name,
        args.group,
        args.port,
        discovery_port=layered.get("discovery_port", None, int),
    )
    logger.info("sending as %s/%s on port %d", args.group, args.name, sender.port)
    try:
        if args.wait_subscribers > 0:
            deadline = time.monotonic() + args.wait_timeout
            while sender.subscriber_count < args.wait_subscribers:
                if time.monotonic() >= deadline:
                    logger.error("no subscriber arrived within %.1fs", args.wait_timeout)
                    return 1
                time.sleep(0.05)
        sent = play(
            sender,
            samples,
            sample_rate_hz=rate,
            frame_samples=args.frame_samples,
            realtime=args.realtime,
        )
        logger.info("sent %d audio frames", sent)
    finally:
        sender.close()
    return 0


def cmd_relay(args: argparse.Namespace) -> int:
    layered = Layered(args)
    input_source = layered.get("input")
    output_name = layered.get("output_name")
    if not input_source or not output_name:
        print("relay requires --input and --output-name (or TSRM_INPUT/TSRM_OUTPUT_NAME)",
              file=sys.stderr)
        return 2
    cfg = RelayConfig(
        input=input_source,
        output_name=output_name,
        output_group=args.output_group,
        output_port=args.output_port,
        window=WindowConfig(
            window_samples=layered.get("window_samples", 48128, int),
            hop_samples=args.hop_samples,
            sample_rate_hz=args.rate,
        ),
        tagger=layered.get("tagger", "reference"),
        queue_depth=args.queue_depth,
        stats_interval=args.stats_interval,
        discovery_port=layered.get("discovery_port", None, int),
    )
    relay = Relay(cfg)
    previous = _install_stop_handlers(relay.request_stop)
    try:
        relay.run()
    except OSError as exc:
        logger.error("relay failed to start: %s", exc)
        return 1
    finally:
        _restore_handlers(previous)
    return 0


def cmd_monitor(args: argparse.Namespace) -> int:
    layered = Layered(args)
    stop = threading.Event()
    previous = _install_stop_handlers(stop.set)
    discovery = layered.get("discovery_port", None, int)
    finder = None
    backoff = 0.5
    try:
        while not stop.is_set():
            mode, a, b = parse_source(args.source)
            try:
                if mode == "direct":
                    address = (a, b)
                else:
                    if finder is None:
                        finder = Finder(port=discovery)
                    ad = finder.wait_for(a, b, timeout=args.connect_timeout)
                    if ad is None:
                        raise ConnectError(f"source {a}/{b} not discovered")
                    address = ad.address
                receiver = Receiver.connect(
                    address, kinds_mask=transport.KIND_BIT_METADATA,
                    timeout=args.connect_timeout,
                )
            except (ConnectError, OSError) as exc:
                logger.warning("monitor connect failed (%s); retrying in %.1fs", exc, backoff)
                if stop.wait(backoff):
                    break
                backoff = min(backoff * 2, 8.0)
                continue
            logger.info("monitoring %s", args.source)
            backoff = 0.5
            with receiver:
                while not stop.is_set():
                    frame = receiver.recv_frame(timeout=0.2)
                    if frame is transport.TIMEOUT:
                        continue
                    if frame is transport.END_OF_STREAM:
                        logger.info("source closed; reconnecting")
                        break
                    try:
                        result, source_name = parse_metadata_xml(frame)
                    except NotTagMetadata:
                        continue
                    except ParseError as exc:
                        logger.warning("skipping malformed tag metadata: %s", exc)
                        continue
                    tags = " ".join(
                        f"{p.label}:{p.score:.4f}" for p in result.predictions
                    )
                    print(
                        f"ts={result.window_start_timestamp_100ns} src={source_name} {tags}",
                        flush=True,
                    )
    finally:
        if finder is not None:
            finder.close()
        _restore_handlers(previous)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    layered = Layered(args)
    if args.sizes:
        try:
            sizes = tuple(int(s) for s in args.sizes.split(","))
        except ValueError:
            print(f"bad --sizes value {args.sizes!r}", file=sys.stderr)
            return 2
        if not sizes or any(s <= 0 for s in sizes):
            print("--sizes entries must be positive integers", file=sys.stderr)
            return 2
    else:
        sizes = bench_mod.default_buffer_sizes()
    tagger_spec = layered.get("tagger", "reference")
    plan = bench_mod.BenchPlan(
        buffer_sizes=sizes,
        repetitions=args.reps,
        warmup=args.warmup,
        tagger=make_tagger(tagger_spec),
    )
    tagger_name = tagger_spec if isinstance(tagger_spec, str) else type(tagger_spec).__name__

    def emit(records) -> None:
        if args.out and args.out != "-":
            bench_mod.write_csv(records, args.out, tagger_name=tagger_name)
        else:
            bench_mod.write_csv(records, sys.stdout, tagger_name=tagger_name)

    try:
        records = bench_mod.run_bench(plan)
    except bench_mod.BenchAborted as exc:
        logger.error("bench aborted: %s; flushing %d partial records", exc, len(exc.records))
        emit(exc.records)
        return 1
    emit(records)
    if len(records) >= 3:
        logger.info("rank correlation (size vs median latency): %.3f",
                    bench_mod.trend_statistic(records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tagstream",
        description="Frame transport toolkit with an audio-tagging pass-through relay.",
    )
    parser.add_argument("--config", help="key=value config file (lowest precedence)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_find = sub.add_parser("find", help="list sources announced on the network")
    p_find.add_argument("--timeout", type=float, default=3.0, help="seconds to listen")
    p_find.add_argument("--discovery-port", dest="discovery_port", type=int,
                        help="announcement UDP port (default 5959)")
    p_find.set_defaults(func=cmd_find)

    p_send = sub.add_parser("send", help="serve a synthetic signal or WAV file as a source")
    p_send.add_argument("--name", required=True, help="source name to announce")
    p_send.add_argument("--group", default="public")
    p_send.add_argument("--port", type=int, default=0, help="TCP port (0 = ephemeral)")
    signal_args = p_send.add_mutually_exclusive_group(required=True)
    signal_args.add_argument("--signal", help="sine:F[:A] | noise[:A[:SEED]] | silence | mix(a+b)")
    signal_args.add_argument("--wav", help="path to a PCM16/float32 WAV file")
    p_send.add_argument("--seconds", type=float, default=5.0, help="signal duration")
    p_send.add_argument("--rate", type=int, default=48000, help="signal sample rate")
    p_send.add_argument("--channels", type=int, default=1)
    p_send.add_argument("--frame-samples", dest="frame_samples", type=int, default=1024)
    p_send.add_argument("--realtime", action="store_true", help="pace frames to wall clock")
    p_send.add_argument("--wait-subscribers", dest="wait_subscribers", type=int, default=0,
                        help="wait for N subscribers before playing")
    p_send.add_argument("--wait-timeout", dest="wait_timeout", type=float, default=10.0)
    p_send.add_argument("--discovery-port", dest="discovery_port", type=int)
    p_send.set_defaults(func=cmd_send)

    p_relay = sub.add_parser("relay", help="pass a source through while tagging its audio")
    p_relay.add_argument("--input", help="input source: group/name, name, or host:port")
    p_relay.add_argument("--output-name", dest="output_name", help="name of the relayed source")
    p_relay.add_argument("--output-group", dest="output_group", default="public")
    p_relay.add_argument("--output-port", dest="output_port", type=int, default=0)
    p_relay.add_argument("--window-samples", dest="window_samples", type=int,
                         help="analysis window length (default 48128)")
    p_relay.add_argument("--hop-samples", dest="hop_samples", type=int,
                         help="hop between windows (default = window, i.e. tumbling)")
    p_relay.add_argument("--rate", type=int, default=48000, help="expected audio sample rate")
    p_relay.add_argument("--tagger", help="reference | external:<command>")
    p_relay.add_argument("--queue-depth", dest="queue_depth", type=int, default=4,
                         help="analysis backlog in windows before dropping oldest")
    p_relay.add_argument("--stats-interval", dest="stats_interval", type=float, default=5.0,
                         help="seconds between JSON stats lines on stderr")
    p_relay.add_argument("--discovery-port", dest="discovery_port", type=int)
    p_relay.set_defaults(func=cmd_relay)

    p_mon = sub.add_parser("monitor", help="print tag predictions carried by a source")
    p_mon.add_argument("--source", required=True, help="group/name, name, or host:port")
    p_mon.add_argument("--connect-timeout", dest="connect_timeout", type=float, default=3.0)
    p_mon.add_argument("--discovery-port", dest="discovery_port", type=int)
    p_mon.set_defaults(func=cmd_monitor)

    p_bench = sub.add_parser("bench", help="measure tagger latency across buffer sizes")
    p_bench.add_argument("--sizes", help="comma-separated buffer sizes in samples")
    p_bench.add_argument("--reps", type=int, default=bench_mod.DEFAULT_REPETITIONS)
    p_bench.add_argument("--warmup", type=int, default=bench_mod.DEFAULT_WARMUP)
    p_bench.add_argument("--tagger", help="reference | external:<command>")
    p_bench.add_argument("--out", help="CSV destination path, or - for stdout")
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
