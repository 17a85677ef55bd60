import json
import os
import signal
import subprocess
import sys
import time

import pytest

from pibits.cli import EXIT_DISAGREE, EXIT_INTERRUPTED, EXIT_OK, EXIT_STORAGE, EXIT_USAGE, main

from conftest import pi_hex


def invoke(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


def hex_line(out):
    return next(line for line in out.splitlines() if line.startswith("Hex")).split(":", 1)[1].strip()


class TestCompute:
    def test_footnote_byte(self, capsys):
        code, out, _ = invoke(capsys, "compute", "--pos", "9", "--bits", "8")
        assert code == EXIT_OK and hex_line(out) == "3F"

    def test_first_sixteen_bits_json(self, capsys):
        code, out, _ = invoke(capsys, "compute", "--pos", "1", "--bits", "16", "--json")
        data = json.loads(out)
        assert code == EXIT_OK
        assert data["hex"] == "243F" and data["position"] == 1 and data["bits"] == 16
        assert {"elapsed", "cpu_seconds", "formula", "precision"} <= data.keys()

    def test_blocks_of_eight(self, capsys):
        _, out, _ = invoke(capsys, "compute", "--pos", "1", "--bits", "64", "--formula", "bbp16")
        assert hex_line(out) == "243F6A88 85A308D3"

    def test_worker_count_does_not_change_output(self, capsys):
        args = ["compute", "--pos", "1000001", "--bits", "256", "--json"]
        a = json.loads(invoke(capsys, *args, "--map-slots", "1", "--reduce-slots", "1", "--jobs", "1")[1])
        b = json.loads(invoke(capsys, *args, "--map-slots", "4", "--reduce-slots", "2", "--jobs", "9",
                              "--threads-per-task", "3")[1])
        assert a["hex"] == b["hex"] == pi_hex(1_000_001, 256)

    def test_env_var_sets_option(self, capsys, monkeypatch):
        monkeypatch.setenv("PIBITS_BITS", "8")
        code, out, _ = invoke(capsys, "compute", "--pos", "9")
        assert code == EXIT_OK and hex_line(out) == "3F"

    @pytest.mark.parametrize("args", [["compute"], ["compute", "--pos", "0"], ["compute", "--pos", "1", "--formula", "x"],
                                      ["compute", "--pos", "1", "--bits", "-3"], ["nonsense"]])
    def test_usage_errors(self, capsys, args):
        assert invoke(capsys, *args)[0] == EXIT_USAGE

    def test_storage_error(self, capsys, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        code, _, err = invoke(capsys, "compute", "--pos", "1", "--bits", "8", "--ckpt-dir", str(blocker / "sub"))
        assert code == EXIT_STORAGE and "storage" in err


class TestVerify:
    def test_footnote_region(self, capsys):
        code, out, _ = invoke(capsys, "verify", "--pos", "9", "--bits", "64", "--json")
        data = json.loads(out)
        assert code == EXIT_OK
        assert data["overlap_start"] == 9 and data["verified_bits"] == 60
        assert data["verified_hex"].startswith("3F")

    def test_full_overlap_at_hundred_thousand(self, capsys):
        code, out, _ = invoke(capsys, "verify", "--pos", "100001", "--bits", "128")
        assert code == EXIT_OK and "Verified  : 124 bits" in out

    def test_bit_flip_is_caught(self, capsys):
        code, out, err = invoke(capsys, "verify", "--pos", "100001", "--bits", "64", "--flip-bit", "100020")
        assert code == EXIT_DISAGREE
        assert "100,020" in out and "verification failed" in err

    def test_needs_position_five(self, capsys):
        assert invoke(capsys, "verify", "--pos", "4")[0] == EXIT_USAGE

    def test_checkpoint_subdirectories(self, capsys, tmp_path):
        invoke(capsys, "verify", "--pos", "9", "--bits", "8", "--ckpt-dir", str(tmp_path))
        assert (tmp_path / "pos-9" / "run.meta").exists() and (tmp_path / "pos-5" / "run.meta").exists()


class TestEstimate:
    def test_reference_rows(self, capsys):
        code, out, _ = invoke(capsys, "estimate", "--pos", str(10**15), "--precision", "52")
        rows = {int(line.split()[0]): line.split()[1] for line in out.splitlines() if line.strip().endswith("%")}
        assert code == EXIT_OK
        assert rows[29].startswith("72.79") and rows[28].startswith("97.19")

    def test_json(self, capsys):
        _, out, _ = invoke(capsys, "estimate", "--pos", str(10**15), "--bound", "28", "--bound", "29", "--json")
        data = json.loads(out)
        assert abs(data["confidence"]["29"] - 0.7279) < 5e-4
        assert abs(data["confidence"]["28"] - 0.9720) < 5e-4

    def test_huge_precision(self, capsys):
        _, out, _ = invoke(capsys, "estimate", "--pos", str(10**15), "--precision", "1024",
                           "--bound", "28", "--bound", "29", "--bound", "900", "--json")
        assert all(c == pytest.approx(1.0) for c in json.loads(out)["confidence"].values())


class TestResume:
    def test_completed_run(self, capsys, tmp_path):
        args = ["--pos", "1001", "--bits", "64", "--ckpt-dir", str(tmp_path), "--json", "--jobs", "3"]
        first = json.loads(invoke(capsys, "compute", *args)[1])
        code, out, _ = invoke(capsys, "resume", "--ckpt-dir", str(tmp_path), "--json")
        assert code == EXIT_OK and json.loads(out)["hex"] == first["hex"] == pi_hex(1001, 64)

    def test_wrong_position(self, capsys, tmp_path):
        invoke(capsys, "compute", "--pos", "1001", "--bits", "64", "--ckpt-dir", str(tmp_path))
        code, _, err = invoke(capsys, "resume", "--ckpt-dir", str(tmp_path), "--pos", "1002")
        assert code == EXIT_USAGE and "start_position" in err

    def test_missing_checkpoint(self, capsys, tmp_path):
        assert invoke(capsys, "resume", "--ckpt-dir", str(tmp_path / "none"))[0] == EXIT_USAGE
        assert invoke(capsys, "resume")[0] == EXIT_USAGE

    def test_compute_refuses_foreign_checkpoint(self, capsys, tmp_path):
        invoke(capsys, "compute", "--pos", "1001", "--bits", "64", "--ckpt-dir", str(tmp_path))
        assert invoke(capsys, "compute", "--pos", "77", "--bits", "64", "--ckpt-dir", str(tmp_path))[0] == EXIT_USAGE


def _cli(*args, **kw):
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    return subprocess.Popen([sys.executable, "-m", "pibits", *args], env=env, stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, **kw)


def _wait_for_jobs(ckpt, count, proc, timeout=120):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if len(list(ckpt.glob("job-*.sum"))) >= count:
            return True
        if proc.poll() is not None:
            return False
        time.sleep(0.02)
    return False


POS = "3000001"
RUN_ARGS = ["--pos", POS, "--bits", "128", "--jobs", "24", "--map-slots", "1", "--reduce-slots", "1", "--json"]


def test_sigkill_then_resume(tmp_path):
    control = subprocess.run([sys.executable, "-m", "pibits", "compute", *RUN_ARGS], capture_output=True, text=True)
    expected = json.loads(control.stdout)["hex"]

    ckpt = tmp_path / "run"
    proc = _cli("compute", *RUN_ARGS, "--ckpt-dir", str(ckpt))
    assert _wait_for_jobs(ckpt, 3, proc), "no jobs persisted before the run ended"
    proc.send_signal(signal.SIGKILL)
    proc.communicate()
    done = len(list(ckpt.glob("job-*.sum")))
    assert 3 <= done < 24

    resumed = subprocess.run([sys.executable, "-m", "pibits", "resume", "--ckpt-dir", str(ckpt), "--json"],
                             capture_output=True, text=True)
    assert resumed.returncode == EXIT_OK, resumed.stderr
    assert json.loads(resumed.stdout)["hex"] == expected


def test_sigint_exits_130_and_keeps_jobs(tmp_path):
    ckpt = tmp_path / "run"
    proc = _cli("compute", *RUN_ARGS, "--ckpt-dir", str(ckpt))
    assert _wait_for_jobs(ckpt, 2, proc)
    proc.send_signal(signal.SIGINT)
    _, err = proc.communicate(timeout=60)
    assert proc.returncode == EXIT_INTERRUPTED, err
    assert "resume" in err
    assert len(list(ckpt.glob("job-*.sum"))) >= 2
