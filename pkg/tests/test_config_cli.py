import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pilotforge import cli
from pilotforge import experiment as ex
from pilotforge.channel import ChannelDataset
from pilotforge.config import ConfigError, ExperimentConfig, load_config, parse_config
from pilotforge.selection import PilotPattern

TINY = {
    "schema_version": 1,
    "seed": 3,
    "nf": 8,
    "nn": 4,
    "train_count": 44,
    "val_count": 4,
    "test_count": 22,
    "snr_list": [0, 6, 12, 15, 18, 24, 30, 3, 9, 21, 27],
    "np_list": [4],
    "np_sweep": [4, 6],
    "sweep_snr_db": 15,
    "selector_epochs": 2,
    "decoder_widths": [16],
    "decoder_epochs": 2,
    "e2e_epochs": 1,
    "srcnn_channels": [4, 4],
    "srcnn_kernels": [3, 1, 3],
    "dncnn_depth": 3,
    "dncnn_width": 4,
    "batch_size": 16,
}


def write_config(path, **overrides):
    values = {**TINY, **overrides}
    path.write_text("# tiny test run\n" + "".join(f"{k} = {json.dumps(v)}\n" for k, v in values.items()))
    return path


def test_default_config_matches_desk_scale():
    c = ExperimentConfig()
    assert c.counts() == (3200, 400, 400)
    assert c.snr_list == tuple(float(s) for s in range(0, 31, 3))
    assert set(c.np_sweep) >= {8, 16, 32, 48}
    assert (c.selector_epochs, c.e2e_epochs, c.snr_window_boundary_db) == (100, 150, 15.0)


def test_config_text_roundtrip(tmp_path):
    c = ExperimentConfig(seed=9, np_list=(8,))
    assert parse_config(c.to_text()) == c
    assert parse_config(c.to_text()).digest() == c.digest()


def test_numerals_normalised_for_hashing():
    a = parse_config("schema_version = 1\nspeed_kmh = 50\nsnr_list = [0, 15]\nsweep_snr_db = 15")
    b = parse_config("schema_version = 1\nspeed_kmh = 50.0\nsnr_list = [0.0, 15.0]\nsweep_snr_db = 15.0")
    assert a == b and a.digest() == b.digest()


def test_digest_ignores_out_dir():
    assert ExperimentConfig(out_dir="a").digest() == ExperimentConfig(out_dir="b").digest()
    assert ExperimentConfig(seed=1).digest() != ExperimentConfig(seed=2).digest()


@pytest.mark.parametrize("text,match", [
    ("seed = 1", "schema_version"),
    ("schema_version = 2", "schema_version"),
    ("schema_version = 1\nbogus = 3", "unknown key"),
    ("schema_version = 1\nseed = 1\nseed = 2", "duplicate"),
    ("schema_version = 1\nseed = \"x\"", "wrong type"),
    ("schema_version = 1\naugment = 1", "wrong type"),
    ("schema_version = 1\nnp_list = [7]", "even"),
    ("schema_version = 1\nnp_list = [2000]", "within"),
    ("schema_version = 1\ntrain_count = 0", "positive"),
    ("schema_version = 1\nsweep_snr_db = 14", "snr_list"),
    ("schema_version = 1\nselector_t0 = 0.001", "selector_t0"),
    ("schema_version = 1\nsrcnn_kernels = [9, 2, 5]", "odd"),
    ("schema_version = 1\nnp_list = [8.5]", "integers"),
    ("schema_version = 1\njust words", "key = value"),
])
def test_config_validation_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_out_dir_blocked_by_file(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(ConfigError, match="blocked"):
        ExperimentConfig(out_dir=str(tmp_path / "f" / "run"))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_cli_help_and_exit_codes(tmp_path, capsys):
    assert cli.run(["--help"]) == 0
    assert cli.run(["gen-data", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("schema_version = 1\nunknown_thing = 1\n")
    assert cli.run(["gen-data", "--config", str(bad)]) == 1
    assert cli.run(["train", "--np", "4", "--pattern", "hexagonal"]) == 1
    assert cli.run(["frobnicate"]) == 1
    cfg = write_config(tmp_path / "run.cfg")
    out = tmp_path / "run"
    # artifacts missing: named validation error
    assert cli.run(["select", "--config", str(cfg), "--out", str(out), "--np", "4"]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_cli_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PILOTFORGE_THREADS", "many")
    assert cli.run(["gen-data", "--config", str(write_config(tmp_path / "c.cfg")), "--out", str(tmp_path / "o")]) == 1


def test_cli_runtime_error_exit_code(tmp_path):
    cfg = write_config(tmp_path / "run.cfg")
    out = tmp_path / "run"
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    # a directory where the report file should go makes the write fail at runtime
    (out / "reports" / "report.csv").mkdir(parents=True)
    assert cli.run(["select", "--config", str(cfg), "--out", str(out), "--np", "4"]) == 0
    for args in (["--pattern", "cae"], ["--pattern", "uniform"]):
        assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--np", "4", *args]) == 0
    for w in ("low", "high"):
        assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--np", "4", "--pattern", "uniform",
                        "--snr-window", w]) == 0
    for n in (6,):
        assert cli.run(["select", "--config", str(cfg), "--out", str(out), "--np", str(n)]) == 0
        for src in ("cae", "uniform"):
            assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--np", str(n), "--pattern", src]) == 0
    assert cli.run(["eval", "--config", str(cfg), "--out", str(out)]) == 2


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.cfg")
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out)]
    codes = [cli.run(["gen-data", *base])]
    for n in (4, 6):
        codes.append(cli.run(["select", *base, "--np", str(n)]))
        for src in ("cae", "uniform"):
            codes.append(cli.run(["train", *base, "--np", str(n), "--pattern", src]))
    for w in ("low", "high"):
        codes.append(cli.run(["train", *base, "--np", "4", "--pattern", "uniform", "--snr-window", w]))
    codes.append(cli.run(["eval", *base]))
    codes.append(cli.run(["report", *base]))
    return {"cfg": cfg, "out": out, "base": base, "codes": codes}


def test_full_cli_run_succeeds(tiny_run):
    assert tiny_run["codes"] == [0] * len(tiny_run["codes"])
    out = tiny_run["out"]
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert {k: v["count"] for k, v in manifest["files"].items()} == {"train": 44, "val": 4, "test": 22}
    for name in ("cae_full_np4", "uniform_full_np4", "uniform_low_np4", "uniform_high_np4"):
        assert (out / "pipelines" / f"{name}.pfck").exists()
    blobs = {(out / "pipelines" / f"uniform_{w}_np4.pfck").read_bytes() for w in ("full", "low", "high")}
    assert len(blobs) == 3


def test_selected_pattern_file(tiny_run):
    p = PilotPattern.load(tiny_run["out"] / "patterns" / "cae_np4.txt")
    assert len(p) == 4 and (p.nf, p.nn) == (8, 4)


def test_low_window_filter_count(tiny_run):
    from pilotforge.nn import load_checkpoint

    train = ChannelDataset.load(tiny_run["out"] / "data" / "train.pfds")
    _, meta = load_checkpoint(tiny_run["out"] / "pipelines" / "uniform_low_np4.pfck")
    assert meta["train_records"] == int(np.sum(train.snr_db <= 15)) == 24
    _, meta = load_checkpoint(tiny_run["out"] / "pipelines" / "uniform_high_np4.pfck")
    assert meta["train_records"] == int(np.sum(train.snr_db >= 15)) == 24


def test_report_csv_contents(tiny_run):
    rows = ex.read_report(tiny_run["out"] / "reports" / "report.csv")
    text = (tiny_run["out"] / "reports" / "report.csv").read_text()
    assert text.splitlines()[0] == ",".join(ex.REPORT_COLUMNS)
    methods4 = {r.method for r in rows if r.np == 4}
    assert methods4 == {"cae-channelnet", "uniform-channelnet", "uniform-low", "uniform-high", "ls-decoder",
                        "mmse", "mmse-uniform"}
    assert {r.method for r in rows if r.np == 6} == set(ex.SWEEP_METHODS)
    for m in methods4:
        assert len([r for r in rows if r.np == 4 and r.method == m]) == 11
    assert sum(r.frames for r in rows if r.np == 4 and r.method == "mmse") == 22
    assert all(r.mse_raw >= 0 and r.frames >= 1 for r in rows)


def test_report_outputs(tiny_run):
    fig = tiny_run["out"] / "reports" / "figures"
    files = sorted(p.name for p in fig.iterdir())
    assert "mse_vs_snr_np4_cae-channelnet.dat" in files
    assert "mse_vs_np_snr15_mmse.dat" in files
    assert "mse_vs_np_snr15_uniform-low.dat" not in files  # only one np value
    assert len([f for f in files if f.startswith("mse_vs_snr_")]) == 7 + 3
    render = (fig / "render_cae_np4.txt").read_text()
    assert render.count("X") == 4
    assert (fig / "render_uniform_np6.txt").read_text().count("X") == 6
    sweep = (fig / "mse_vs_np_snr15_mmse.dat").read_text().splitlines()
    assert [line.split()[0] for line in sweep[2:]] == ["4", "6"]


def test_report_is_idempotent(tiny_run):
    fig = tiny_run["out"] / "reports" / "figures"
    before = {p.name: p.read_bytes() for p in fig.iterdir()}
    assert cli.run(["report", *tiny_run["base"]]) == 0
    assert {p.name: p.read_bytes() for p in fig.iterdir()} == before


def test_eval_is_deterministic(tiny_run):
    csv = tiny_run["out"] / "reports" / "report.csv"
    before = csv.read_bytes()
    assert cli.run(["eval", *tiny_run["base"]]) == 0
    assert csv.read_bytes() == before


def test_eval_thread_count_does_not_change_results(tiny_run, monkeypatch):
    csv = tiny_run["out"] / "reports" / "report.csv"
    before = csv.read_bytes()
    monkeypatch.setenv("PILOTFORGE_THREADS", "3")
    assert cli.run(["eval", *tiny_run["base"]]) == 0
    assert csv.read_bytes() == before


def test_malformed_report_rejected(tmp_path):
    bad = tmp_path / "r.csv"
    bad.write_text("method,np\nx,1\n")
    assert cli.run(["report", "--out", str(tmp_path / "o"), "--csv", str(bad)]) == 1
    bad.write_text(",".join(ex.REPORT_COLUMNS) + "\nmmse,8,0,-1,0,3\n")
    with pytest.raises(ex.ReportFormatError):
        ex.read_report(bad)


def test_seed_flag_changes_data(tmp_path):
    cfg = write_config(tmp_path / "c.cfg")
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "99"]) == 0
    read = lambda d: (tmp_path / d / "data" / "train.pfds").read_bytes()  # noqa: E731
    assert read("a") == read("b") != read("c")


SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def test_shipped_configs_parse():
    assert load_config(SCRIPTS / "desk.cfg") == ExperimentConfig(out_dir="runs/desk")
    acc = load_config(SCRIPTS / "acceptance.cfg")
    assert acc.counts() == (3200, 400, 400) and 8 in acc.np_list and 48 in acc.np_sweep


def test_run_experiment_script(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", np_sweep=[4])
    out = tmp_path / "run"
    proc = subprocess.run([sys.executable, str(SCRIPTS / "run_experiment.py"), str(cfg), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    shown = subprocess.run([sys.executable, str(SCRIPTS / "show_report.py"), str(out / "reports" / "report.csv")],
                           capture_output=True, text=True)
    assert shown.returncode == 0 and "cae-channelnet" in shown.stdout and "uniform-high" in shown.stdout
