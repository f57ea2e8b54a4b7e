"""End-to-end CLI tests on a miniature scenario.

Each subcommand runs through `main(argv)` so the exit-code contract is part
of what is asserted: 0 success, 1 user error. Heavy stages (synth, spectro)
run once per module; commands are deterministic so later tests may rerun them
freely.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from grlforge.cli import main
from grlforge.config import parse_config

CONFIG = """
seed = 3
output_dir = {out}
scenario.n_domains = 3
scenario.trace_duration = 0.02
scenario.device_tone_amplitude = 0.3
scenario.noise_sigma = 0.05
scenario.fragile_amplitude = 0.03
scenario.fragile_atoms = 4
stft.out_freq_bins = 16
stft.out_time_bins = 16
data.n_per_domain = 8
data.held_out = 2
train.mode = OTF
train.lam = 1.0
train.epochs = 3
train.batch_size = 4
train.keep = best
sweep.replicates = 1
analysis.freq_bands = 4
analysis.time_blocks = 4
analysis.n_perturb = 64
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    out = base / "run"
    cfg = base / "exp.txt"
    cfg.write_text(CONFIG.format(out=out), encoding="utf-8")
    assert main(["synth", "-c", str(cfg)]) == 0
    assert main(["spectro", "-c", str(cfg)]) == 0
    return base


def _cfg(workdir) -> str:
    return str(workdir / "exp.txt")


def _out(workdir) -> Path:
    return workdir / "run"


# --- synth / spectro ----------------------------------------------------------

def test_synth_writes_traces_manifest_and_resolved_config(workdir):
    out = _out(workdir)
    traces = sorted((out / "traces").glob("trace_*.bin"))
    assert len(traces) == 3 * 8
    assert (out / "traces" / "manifest.txt").exists()
    resolved = parse_config((out / "config.txt").read_text(encoding="utf-8"))
    assert resolved.stft.scale is not None  # defaults filled in
    assert resolved.scenario.fragile_gain > 0


def test_synth_determinism_across_directories(workdir, tmp_path):
    cfg2 = tmp_path / "exp2.txt"
    cfg2.write_text(CONFIG.format(out=tmp_path / "other"), encoding="utf-8")
    assert main(["synth", "-c", str(cfg2)]) == 0
    a = sorted((_out(workdir) / "traces").glob("trace_*.bin"))
    b = sorted((tmp_path / "other" / "traces").glob("trace_*.bin"))
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_synth_refuses_single_domain(tmp_path, capsys):
    cfg = tmp_path / "exp.txt"
    cfg.write_text(f"output_dir = {tmp_path / 'x'}\nscenario.n_domains = 1\n",
                   encoding="utf-8")
    assert main(["synth", "-c", str(cfg)]) == 1
    assert "n_domains" in capsys.readouterr().err


def test_spectro_splits_exist(workdir):
    out = _out(workdir)
    for name in ("train", "validation", "test"):
        assert (out / f"{name}.spectra").exists()


def test_spectro_without_traces_fails(tmp_path, capsys):
    cfg = tmp_path / "exp.txt"
    cfg.write_text(f"output_dir = {tmp_path / 'empty'}\n", encoding="utf-8")
    assert main(["spectro", "-c", str(cfg)]) == 1
    assert "synth" in capsys.readouterr().err


# --- train ---------------------------------------------------------------------

def test_train_writes_metrics_and_checkpoint(workdir):
    out = _out(workdir)
    assert main(["train", "-c", _cfg(workdir)]) == 0
    metrics = out / "metrics_otf_seed3.csv"
    assert metrics.exists() and (out / "model_otf_seed3.ckpt").exists()
    header = metrics.read_text(encoding="utf-8").splitlines()[0]
    assert header == "epoch,split,label_acc,domain_acc,label_loss,domain_loss"


def test_train_rerun_is_byte_identical(workdir):
    out = _out(workdir)
    assert main(["train", "-c", _cfg(workdir)]) == 0
    first = (out / "metrics_otf_seed3.csv").read_bytes()
    ckpt = (out / "model_otf_seed3.ckpt").read_bytes()
    assert main(["train", "-c", _cfg(workdir)]) == 0
    assert (out / "metrics_otf_seed3.csv").read_bytes() == first
    assert (out / "model_otf_seed3.ckpt").read_bytes() == ckpt


def test_train_cnn_forces_lambda_and_warns(workdir, capsys):
    out = _out(workdir)
    rc = main(["train", "-c", _cfg(workdir), "--mode", "cnn",
               "--lambda", "0.5", "--seed", "4"])
    assert rc == 0
    assert "forces lambda = 0" in capsys.readouterr().err
    resolved = parse_config((out / "config.txt").read_text(encoding="utf-8"))
    assert resolved.train.mode == "CNN" and resolved.train.lam == 0.0
    assert (out / "model_cnn_seed4.ckpt").exists()


def test_train_seed_flag_names_artifacts(workdir):
    out = _out(workdir)
    assert main(["train", "-c", _cfg(workdir), "--seed", "8"]) == 0
    assert (out / "metrics_otf_seed8.csv").exists()


def test_env_seed_override(workdir, monkeypatch):
    out = _out(workdir)
    monkeypatch.setenv("GRLFORGE_SEED", "12")
    assert main(["train", "-c", _cfg(workdir)]) == 0
    assert (out / "metrics_otf_seed12.csv").exists()


def test_train_without_spectra_fails(tmp_path, capsys):
    cfg = tmp_path / "exp.txt"
    cfg.write_text(f"output_dir = {tmp_path / 'void'}\n", encoding="utf-8")
    assert main(["train", "-c", str(cfg)]) == 1
    assert "spectro" in capsys.readouterr().err


# --- sweep ---------------------------------------------------------------------

def test_sweep_staging_rule(workdir, capsys):
    out = _out(workdir)
    for stale in ("sweep_epsilon.csv", "star_epsilon.csv"):
        (out / stale).unlink(missing_ok=True)
    assert main(["sweep", "-c", _cfg(workdir), "--param", "lambda"]) == 1
    assert "staging rule" in capsys.readouterr().err

    assert main(["sweep", "-c", _cfg(workdir), "--param", "epsilon"]) == 0
    assert (out / "sweep_epsilon.csv").exists()
    star = (out / "star_epsilon.csv").read_text(encoding="utf-8").splitlines()
    assert star[0] == "param,star_value,tau"

    assert main(["sweep", "-c", _cfg(workdir), "--param", "lambda"]) == 0
    assert (out / "sweep_lambda.csv").exists()
    assert (out / "star_lambda.csv").exists()


# --- explain / audit / ensemble / report ---------------------------------------

def test_explain_single_item(workdir):
    out = _out(workdir)
    ckpt = str(out / "model_otf_seed3.ckpt")
    assert main(["explain", "-c", _cfg(workdir), "--checkpoint", ckpt,
                 "--item", "0"]) == 0
    rows = (out / "explanation_item0.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "segment,freq_band,time_block,coefficient"
    assert len(rows) == 1 + 4 * 4
    imp = (out / "frequency_importance.csv").read_text(encoding="utf-8").splitlines()
    assert imp[0] == "freq_bin_hz,importance"
    assert len(imp) == 1 + 4


def test_explain_bad_item_index(workdir, capsys):
    ckpt = str(_out(workdir) / "model_otf_seed3.ckpt")
    assert main(["explain", "-c", _cfg(workdir), "--checkpoint", ckpt,
                 "--item", "999"]) == 1
    assert "outside" in capsys.readouterr().err


def test_audit_epsilon_zero_rho_equals_gamma(workdir):
    out = _out(workdir)
    assert main(["audit", "-c", _cfg(workdir), "--epsilon", "0"]) == 0
    rows = (out / "usefulness.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "feature,rho,gamma,epsilon,method,stderr,n"
    assert len(rows) == 1 + 3 * 16  # one per (plane, row)
    for row in rows[1:]:
        _, rho, gamma, *_ = row.split(",")
        assert rho == gamma


def test_audit_positive_epsilon_gamma_below_rho(workdir):
    out = _out(workdir)
    assert main(["audit", "-c", _cfg(workdir), "--epsilon", "0.06"]) == 0
    rows = (out / "usefulness.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert all(float(r.split(",")[2]) <= float(r.split(",")[1]) for r in rows)


def test_ensemble_votes(workdir):
    out = _out(workdir)
    members = [str(out / "model_otf_seed3.ckpt"), str(out / "model_cnn_seed4.ckpt"),
               str(out / "model_otf_seed8.ckpt")]
    assert main(["ensemble", "-c", _cfg(workdir)] + members) == 0
    rows = (out / "ensemble.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "item,truth,vote,n_agree"
    for row in rows[1:]:
        item, truth, vote, n_agree = map(int, row.split(","))
        assert vote in (0, 1)
        assert 1 <= n_agree <= len(members)


def test_ensemble_refuses_bad_checkpoint(workdir, tmp_path, capsys):
    bogus = tmp_path / "bad.ckpt"
    bogus.write_bytes(b"NOTAMODL" + b"\x00" * 32)
    assert main(["ensemble", "-c", _cfg(workdir), str(bogus)]) == 1
    assert "bad magic" in capsys.readouterr().err


def test_report_summarizes_artifacts(workdir, capsys):
    out = _out(workdir)
    assert main(["report", "-c", _cfg(workdir)]) == 0
    text = (out / "report.txt").read_text(encoding="utf-8")
    assert "metrics_otf_seed3.csv" in text
    assert "star" in text
    assert "ensemble.csv" in text


# --- exit-code contract ----------------------------------------------------------

def test_usage_error_exits_one(capsys):
    assert main(["train"]) == 1  # missing --config
    assert main(["no-such-command"]) == 1
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out
