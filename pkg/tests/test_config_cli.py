import subprocess
import sys
from fractions import Fraction

import pytest

from hammersim.cli import main
from hammersim.config import ConfigError, load_config, parse_config
from hammersim.engine import SimConfig

CONFIG = """
# desk-sized run
geometry.banks = 1
geometry.rows_per_bank = 64
geometry.words_per_row = 8
timing.refresh_scale = 7.8
fault.profile = C19
fault.scale = 1000
fault.threshold_min = 10
fault.threshold_max = 30
mitigation.kind = para
mitigation.p = 0.005
ecc.enabled = true
seed.master = 42
"""


def test_parse_config():
    cfg = parse_config(CONFIG)
    assert (cfg.geometry.banks, cfg.geometry.rows_per_bank, cfg.geometry.words_per_row) == (1, 64, 8)
    assert cfg.timing.refresh_scale == Fraction(39, 5)
    assert cfg.profile.words_with_k_victims == (141, 0, 0, 0)
    assert (cfg.profile.threshold_min, cfg.profile.threshold_max) == (10, 30)
    assert cfg.mitigation.kind == "para" and cfg.mitigation.p == 0.005
    assert cfg.ecc.enabled and cfg.seed == 42


def test_empty_config_is_default():
    assert parse_config("") == SimConfig()


@pytest.mark.parametrize("text", [
    "geometry.bankz = 2",
    "colour.banks = 2",
    "geometry.banks",
    "geometry.banks = two",
    "geometry.banks = 0",
    "mitigation.kind = magic",
    "ecc.enabled = maybe",
    "fault.profile = Z99",
    "geometry.banks = 1\ngeometry.banks = 2",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_relative_paths_resolve(tmp_path):
    (tmp_path / "c.cfg").write_text("fault.victim_map = maps/v.txt\n")
    assert load_config(tmp_path / "c.cfg").victim_map_path == str(tmp_path / "maps" / "v.txt")


def write_cfg(tmp_path, text):
    p = tmp_path / "sim.cfg"
    p.write_text(text)
    return str(p)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "geometry.banks = 1\ngeometry.rows_per_bank = 64\ngeometry.words_per_row = 8\n"
                              "fault.threshold_min = 10\nfault.threshold_max = 30\n"
                              f"fault.victim_map = {tmp_path / 'v.txt'}\n")
    assert main(["gen-profile", "--name", "C19", "--scale", "1000", "--seed", "3", "--config", cfg,
                 "--out", str(tmp_path / "v.txt")]) == 0
    assert (tmp_path / "v.txt").read_text().startswith("#victim-map v1")
    assert main(["gen-trace", "--pattern", "double_sided", "--row", "10", "--row2", "12", "--count", "40",
                 "--config", cfg, "--out", str(tmp_path / "t.trace")]) == 0
    assert main(["run", "--config", cfg, "--trace", str(tmp_path / "t.trace"), "--out", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    assert {p.name for p in out.iterdir()} == {"metrics.txt", "metrics.csv", "flips.csv", "flips_by_row.csv"}
    assert "total_activations = 80" in (out / "metrics.txt").read_text()
    assert (out / "flips.csv").read_text().startswith("time_ns,bank,row,word,bit,aggressor_row\n")
    capsys.readouterr()
    assert main(["report", str(out / "metrics.txt"), str(out / "metrics.txt")]) == 0
    text = capsys.readouterr().out
    assert "runs: 2" in text and "activations: 160" in text


def test_cli_run_with_violations_exits_2(tmp_path):
    trace = tmp_path / "bad.trace"
    trace.write_text("0,ACT,0,1\n10,ACT,0,2\n")
    assert main(["run", "--trace", str(trace), "--out", str(tmp_path / "o")]) == 2


def test_cli_hard_errors_exit_1(tmp_path, capsys):
    trace = tmp_path / "bad.trace"
    trace.write_text("0,ACT,0,1\nnot a command\n")
    assert main(["run", "--trace", str(trace), "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err
    cfg = write_cfg(tmp_path, "geometry.nope = 1\n")
    assert main(["run", "--config", cfg, "--trace", str(trace), "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "m.txt"
    bad.write_text("flips_total = lots\n")
    assert main(["report", str(bad)]) == 1


def test_cli_validate_para(capsys):
    assert main(["validate-para", "--p", "0.05", "--n", "100", "--trials", "20000", "--seed", "1"]) == 0
    assert "agree" in capsys.readouterr().out


def test_cli_sweep_refresh(tmp_path):
    cfg = write_cfg(tmp_path, "geometry.banks = 1\ngeometry.rows_per_bank = 32\ngeometry.words_per_row = 4\n"
                              "timing.retention_window_ns = 64000\ntiming.ref_commands_per_window = 8\n"
                              "fault.threshold_min = 165\nfault.threshold_max = 1250\n")
    out = tmp_path / "s.csv"
    assert main(["sweep-refresh", "--intervals-ms", "8,64", "--profile", "NULL", "--config", cfg,
                 "--out", str(out)]) == 0
    assert out.read_text() == "interval_ms,NULL\n8,0\n64,0\n"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hammersim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-refresh" in res.stdout
