import json
import signal
import socket
import subprocess
import sys
import threading
import time

import pytest

from tagstream import cli
from tagstream.discovery import Announcer, SourceAdvertisement
from tagstream.transport import Receiver, Sender

from conftest import wait_until


def free_udp_port() -> int:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


def run_cli(*args):
    return cli.main(list(args))


class TestHelpAndUsage:
    @pytest.mark.parametrize(
        "argv",
        [["--help"], ["find", "--help"], ["send", "--help"], ["relay", "--help"],
         ["monitor", "--help"], ["bench", "--help"]],
    )
    def test_help_exits_zero(self, argv):
        with pytest.raises(SystemExit) as info:
            run_cli(*argv)
        assert info.value.code == 0

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as info:
            run_cli("find", "--bogus")
        assert info.value.code == 2

    def test_send_signal_and_wav_conflict(self):
        with pytest.raises(SystemExit) as info:
            run_cli("send", "--name", "x", "--signal", "silence", "--wav", "f.wav")
        assert info.value.code == 2


class TestLayeredPrecedence:
    KEYS = ["discovery_port", "input", "output_name", "window_samples", "tagger"]

    @pytest.mark.parametrize("key", KEYS)
    def test_flag_beats_env_beats_file(self, key, tmp_path, monkeypatch):
        config = tmp_path / "relay.conf"
        config.write_text(f"{key} = from_file\n")
        monkeypatch.setenv(f"TSRM_{key.upper()}", "from_env")
        parser_args = type("Args", (), {"config": str(config), key: "from_flag"})()
        assert cli.Layered(parser_args).get(key) == "from_flag"
        parser_args_no_flag = type("Args", (), {"config": str(config), key: None})()
        assert cli.Layered(parser_args_no_flag).get(key) == "from_env"
        monkeypatch.delenv(f"TSRM_{key.upper()}")
        assert cli.Layered(parser_args_no_flag).get(key) == "from_file"
        bare = type("Args", (), {"config": None, key: None})()
        assert cli.Layered(bare).get(key, "default") == "default"

    def test_env_casts(self, monkeypatch):
        monkeypatch.setenv("TSRM_WINDOW_SAMPLES", "2048")
        args = type("Args", (), {"config": None, "window_samples": None})()
        assert cli.Layered(args).get("window_samples", 48128, int) == 2048

    def test_config_file_syntax_error(self, tmp_path):
        config = tmp_path / "bad.conf"
        config.write_text("not a pair\n")
        args = type("Args", (), {"config": str(config)})()
        with pytest.raises(ValueError):
            cli.Layered(args)


class TestFind:
    def test_empty_network_exit_2(self, capsys):
        port = free_udp_port()
        code = run_cli("find", "--timeout", "0.4", "--discovery-port", str(port))
        assert code == 2
        assert capsys.readouterr().out == ""

    def test_two_sources_sorted(self, capsys):
        port = free_udp_port()
        ads = [
            SourceAdvertisement(name="zeta", host="127.0.0.1", port=7001),
            SourceAdvertisement(name="alpha", host="127.0.0.1", port=7002),
        ]
        announcers = [
            Announcer(ad, 0.1, destinations=[("127.0.0.1", port)]) for ad in ads
        ]
        try:
            code = run_cli("find", "--timeout", "0.6", "--discovery-port", str(port))
        finally:
            for announcer in announcers:
                announcer.stop()
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        assert out == ["public/alpha 127.0.0.1:7002", "public/zeta 127.0.0.1:7001"]


class TestSend:
    def test_missing_wav_exit_1(self, capsys):
        code = run_cli("send", "--name", "x", "--wav", "/nonexistent/clip.wav")
        assert code == 1

    def test_bad_signal_spec_exit_2(self):
        code = run_cli("send", "--name", "x", "--signal", "triangle:440")
        assert code == 2

    def test_signal_observable_by_receiver(self):
        port = free_udp_port()  # isolated discovery so the announcer is harmless
        result = {}

        def receive():
            receiver = Receiver.connect(("127.0.0.1", result["port"]))
            count = 0
            while True:
                frame = receiver.recv_frame(timeout=5.0)
                if not hasattr(frame, "kind"):
                    break
                count += 1
            result["frames"] = count
            receiver.close()

        tcp_probe = socket.socket()
        tcp_probe.bind(("127.0.0.1", 0))
        tcp_port = tcp_probe.getsockname()[1]
        tcp_probe.close()
        result["port"] = tcp_port

        thread = threading.Thread(
            target=lambda: result.update(code=run_cli(
                "send", "--name", "clip", "--port", str(tcp_port),
                "--signal", "sine:440:0.5", "--seconds", "0.5",
                "--wait-subscribers", "1", "--discovery-port", str(port),
            ))
        )
        thread.start()
        wait_until(lambda: _port_open(tcp_port), timeout=5.0, message="sender listening")
        rx_thread = threading.Thread(target=receive)
        rx_thread.start()
        thread.join(timeout=10.0)
        rx_thread.join(timeout=10.0)
        assert result["code"] == 0
        assert result["frames"] == 24  # ceil(24000 / 1024)


def _port_open(port) -> bool:
    try:
        sock = socket.create_connection(("127.0.0.1", port), timeout=0.2)
    except OSError:
        return False
    sock.close()
    return True


class TestBench:
    def test_csv_on_stdout(self, capsys):
        code = run_cli("bench", "--sizes", "1024,2048", "--reps", "2", "--warmup", "0")
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "# tagger=reference"
        assert out[1].startswith("# host=")
        assert out[2].startswith("buffer_samples,")
        assert len(out) == 5

    def test_zero_size_usage_error(self):
        assert run_cli("bench", "--sizes", "0") == 2
        assert run_cli("bench", "--sizes", "abc") == 2

    def test_out_file(self, tmp_path):
        dest = tmp_path / "bench.csv"
        code = run_cli("bench", "--sizes", "1024", "--reps", "1", "--warmup", "0",
                       "--out", str(dest))
        assert code == 0
        assert dest.read_text().startswith("# tagger=reference")

    def test_env_tagger_beats_config_file(self, tmp_path, capsys, monkeypatch):
        config = tmp_path / "bench.conf"
        config.write_text("tagger = external:/does/not/exist\n")
        monkeypatch.setenv("TSRM_TAGGER", "reference")
        code = run_cli("--config", str(config), "bench", "--sizes", "1024",
                       "--reps", "1", "--warmup", "0")
        assert code == 0
        assert capsys.readouterr().out.startswith("# tagger=reference")


class TestRelayProcess:
    def test_sigint_clean_exit_and_stats_line(self):
        proc = subprocess.Popen(
            [sys.executable, "-m", "tagstream.cli", "relay",
             "--input", "127.0.0.1:1", "--output-name", "relayed",
             "--stats-interval", "0.2", "--discovery-port", str(free_udp_port())],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        time.sleep(1.5)
        assert proc.poll() is None  # retry loop keeps it alive despite dead input
        proc.send_signal(signal.SIGINT)
        stdout, stderr = proc.communicate(timeout=10.0)
        assert proc.returncode == 0
        stats_lines = [l for l in stderr.splitlines() if l.startswith("{")]
        assert stats_lines, stderr
        parsed = json.loads(stats_lines[-1])
        assert parsed["frames_passed"] == {"audio": 0, "metadata": 0, "video": 0}

    def test_output_port_busy_exit_1(self):
        blocker = socket.socket()
        blocker.bind(("", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            proc = subprocess.run(
                [sys.executable, "-m", "tagstream.cli", "relay",
                 "--input", "127.0.0.1:1", "--output-name", "relayed",
                 "--output-port", str(port),
                 "--discovery-port", str(free_udp_port())],
                capture_output=True, text=True, timeout=15.0,
            )
        finally:
            blocker.close()
        assert proc.returncode == 1

    def test_relay_missing_args_exit_2(self):
        assert run_cli("relay") == 2


class TestMonitorProcess:
    def test_prints_tags_skips_foreign_and_exits_on_sigterm(self):
        from tagstream.frames import MetadataFrame
        from tagstream.tagging import TagPrediction, TagResult, build_metadata_xml

        sender = Sender("tagsrc", announce=False, advertise_host="127.0.0.1")
        proc = subprocess.Popen(
            [sys.executable, "-m", "tagstream.cli", "monitor",
             "--source", f"127.0.0.1:{sender.port}"],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        try:
            wait_until(lambda: sender.subscriber_count == 1, timeout=10.0,
                       message="monitor connected")
            sender.send_frame(MetadataFrame(1, "<foreign/>"))
            result = TagResult([TagPrediction("Silence", 1.0)], 0, 48128, 48000, 2.0)
            sender.send_frame(build_metadata_xml(result, "tagsrc"))
            line = proc.stdout.readline()
            assert line.strip() == "ts=0 src=tagsrc Silence:1.0000"
            proc.send_signal(signal.SIGTERM)
            proc.communicate(timeout=10.0)
            assert proc.returncode == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.communicate()
            sender.close()
