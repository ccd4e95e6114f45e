import configparser
import json
import os
import shutil
import subprocess
import sys

import pytest

from netpower.cli import main
from netpower.pipeline import OUT_ENV, STAGES

TINY = """[corpus]
n_cycles = 40
[gen]
leaf_cells = 100
n_icg = 2
[design:a]
n_cells = 300
seed = 1
[design:b]
n_cells = 350
seed = 2
workload_seed = 7
[design:c]
n_cells = 400
seed = 3
workload_seed = 8
[split]
train = a, b
test = c
[encoder]
embed_dim = 16
[pretrain]
epochs = 2
cycles_per_scope = 4
eval_cycles_per_scope = 4
[finetune]
n_estimators = 20
max_depth = 3
"""


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One complete ``all`` run on the tiny config, shared by the end-to-end checks."""
    root = tmp_path_factory.mktemp("cli_all")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    env_before = os.environ.pop(OUT_ENV, None)
    try:
        code = main(["all", "-c", str(cfg), "--out", str(root / "out")])
    finally:
        if env_before is not None:
            os.environ[OUT_ENV] = env_before
    return code, root, str(cfg)


def _status(out):
    with open(os.path.join(out, "status.json")) as fh:
        return json.load(fh)


def test_defaults_print_a_loadable_config(capsys, tmp_path):
    assert main(["defaults"]) == 0
    text = capsys.readouterr().out
    cp = configparser.ConfigParser()
    cp.read_string(text)
    assert cp.getint("pretrain", "epochs") == 60
    assert cp.getint("pretrain", "batch_size") == 16
    assert cp.getfloat("pretrain", "lr") == 1e-4
    assert cp.getint("finetune", "n_estimators") == 500 and cp.getint("finetune", "max_depth") == 5


def test_usage_errors_exit_2(cfg_file, tmp_path, capsys):
    assert main(["gen"]) == 2
    assert "--config" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY.replace("n_cycles = 40", "n_cycles = forty"))
    assert main(["gen", "-c", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "corpus.n_cycles" in capsys.readouterr().err
    assert main(["gen", "-c", cfg_file, "--set", "split.test=a", "--out", str(tmp_path / "o")]) == 2
    assert "split.test" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "-c", cfg_file])
    assert exc.value.code == 2


def test_stage_failure_exit_1_names_stage(cfg_file, tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["predict", "-c", cfg_file, "--out", out]) == 1
    assert "predict" in capsys.readouterr().err
    st = _status(out)
    assert st["failed_stage"] == "predict" and st["exit_code"] == 1


def test_gen_is_deterministic(cfg_file, tmp_path):
    outs = [str(tmp_path / k) for k in ("x", "y")]
    for o in outs:
        assert main(["gen", "-c", cfg_file, "--set", "design:a.seed=7", "--out", o]) == 0
    for d in ("a", "b", "c"):
        with open(os.path.join(outs[0], "designs", d, "G.v"), "rb") as f1, \
                open(os.path.join(outs[1], "designs", d, "G.v"), "rb") as f2:
            assert f1.read() == f2.read()


def test_out_environment_variable_wins(cfg_file, tmp_path, monkeypatch):
    env_out = tmp_path / "from_env"
    monkeypatch.setenv(OUT_ENV, str(env_out))
    assert main(["gen", "-c", cfg_file, "--out", str(tmp_path / "flag")]) == 0
    assert (env_out / "designs" / "a" / "G.v").exists()
    assert not (tmp_path / "flag").exists()


def test_all_writes_full_report(full_run):
    code, root, _ = full_run
    assert code == 0
    out = root / "out"
    st = _status(str(out))
    assert [s for s in st["stages"]] == list(STAGES)
    assert all(v["status"] == "ran" for v in st["stages"].values())
    metrics = json.loads((out / "metrics.json").read_text())
    design = metrics["eval"]["designs"][0]
    for g in ("combinational", "register", "clock_tree", "total"):
        assert design["model_mape"][g] >= 0 and design["baseline_mape"][g] >= 0


def test_all_rerun_skips_and_repeat_is_byte_identical(full_run, monkeypatch):
    _, root, cfg = full_run
    monkeypatch.delenv(OUT_ENV, raising=False)
    out = str(root / "out")
    assert main(["all", "-c", cfg, "--out", out]) == 0
    assert all(v["status"] == "skipped" for v in _status(out)["stages"].values())
    # a fresh run elsewhere reproduces the metrics byte for byte
    other = str(root / "again")
    assert main(["all", "-c", cfg, "--out", other]) == 0
    with open(os.path.join(out, "metrics.json"), "rb") as a, open(os.path.join(other, "metrics.json"), "rb") as b:
        assert a.read() == b.read()
    # a changed config section invalidates the dependent stages only
    assert main(["all", "-c", cfg, "--out", out, "--set", "finetune.n_estimators=10"]) == 0
    st = _status(out)["stages"]
    assert st["pretrain"]["status"] == "skipped" and st["finetune"]["status"] == "ran"


def test_console_script_entry_point(cfg_file, tmp_path):
    exe = shutil.which("netpower")
    cmd = [exe] if exe else [sys.executable, "-m", "netpower.cli"]
    env = {k: v for k, v in os.environ.items() if k != OUT_ENV}
    r = subprocess.run(cmd + ["gen", "-c", cfg_file, "--out", str(tmp_path / "o")], capture_output=True,
                       text=True, env=env)
    assert r.returncode == 0, r.stderr
    r = subprocess.run(cmd + ["gen", "-c", str(tmp_path / "missing.ini")], capture_output=True, text=True, env=env)
    assert r.returncode == 2
