import os
import shutil

import subprocess
import sys

import numpy as np
import pytest
import yaml

import pdssm.cli as cli
import pdssm.fsa_tasks as ft
import pdssm.model as md


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj), encoding="utf-8")
    return str(path)


def train_config(out, **over):
    cfg = {
        "seed": 3,
        "out": str(out),
        "task": {"name": "parity"},
        "model": {"dim": 6, "state": 8, "bank": 2, "hidden": 8},
        "train": {"steps": 5, "batch_size": 8, "len_lo": 2, "len_hi": 6,
                  "eval_every": 5, "eval_lengths": [8], "n_eval": 16},
    }
    for key, val in over.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    return cfg


# --- argument plumbing -------------------------------------------------------


def test_no_command_is_usage_error():
    assert cli.main([]) == 2


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_missing_config_file():
    assert cli.main(["train", "--config", "/nonexistent/x.yaml"]) == 2


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = train_config(tmp_path / "out")
    cfg["model"]["statee"] = 8
    del cfg["model"]["state"]
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert cli.main(["train", "--config", path]) == 2
    assert "statee" in capsys.readouterr().err


def test_invalid_value_rejected(tmp_path):
    cfg = train_config(tmp_path / "out", train={"steps": -5})
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert cli.main(["train", "--config", path]) == 2


def test_unknown_task_rejected(tmp_path):
    cfg = train_config(tmp_path / "out", task={"name": "nope"})
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert cli.main(["train", "--config", path]) == 2


# --- env and flag overrides --------------------------------------------------


def test_env_overrides(monkeypatch):
    cfg = {"train": {"steps": 5}}
    monkeypatch.setenv("PDSSM_TRAIN_STEPS", "7")
    monkeypatch.setenv("PDSSM_SEED", "9")
    monkeypatch.setenv("PDSSM_TASK_NAME", "cycle_nav")
    out = cli.apply_env(cfg, os.environ)
    assert out["train"]["steps"] == 7
    assert out["seed"] == 9
    assert out["task"]["name"] == "cycle_nav"


def test_env_unknown_section_rejected(monkeypatch):
    monkeypatch.setenv("PDSSM_FOO_BAR", "1")
    with pytest.raises(cli.ConfigError):
        cli.apply_env({}, os.environ)


def test_env_ignores_acceptance_toggle(monkeypatch):
    monkeypatch.setenv("PDSSM_ACCEPTANCE_SCALE", "smoke")
    assert cli.apply_env({}, os.environ) == {}


def test_flag_beats_env_beats_file(tmp_path, monkeypatch):
    cfg = train_config(tmp_path / "out", train={"steps": 0})
    cfg["seed"] = 1
    path = write_yaml(tmp_path / "c.yaml", cfg)
    monkeypatch.setenv("PDSSM_SEED", "2")
    assert cli.main(["train", "--config", path, "--seed", "3"]) == 0
    resolved = yaml.safe_load((tmp_path / "out" / "config.yaml").read_text())
    assert resolved["seed"] == 3


# --- train -------------------------------------------------------------------


def test_train_smoke_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    path = write_yaml(tmp_path / "c.yaml", train_config(out))
    assert cli.main(["train", "--config", path]) == 0
    assert (out / "final.ckpt").is_file()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,split,length,accuracy,loss"
    assert len(lines) > 1
    assert (out / "config.yaml").is_file() and (out / "run.log").is_file()


def test_train_zero_steps_checkpoint_equals_init(tmp_path):
    out = tmp_path / "run"
    path = write_yaml(tmp_path / "c.yaml", train_config(out, train={"steps": 0}))
    assert cli.main(["train", "--config", path]) == 0
    cfg = md.ModelConfig(vocab=2, n_classes=2, dim=6, state=8, bank=2, hidden=8,
                         depth=1)
    ref = md.init_model(cfg, seed=3)
    md.save_checkpoint(tmp_path / "ref.ckpt", ref)
    assert (out / "final.ckpt").read_bytes() == (tmp_path / "ref.ckpt").read_bytes()


def test_train_rerun_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    p1 = write_yaml(tmp_path / "c1.yaml", train_config(out1))
    p2 = write_yaml(tmp_path / "c2.yaml", train_config(out2))
    assert cli.main(["train", "--config", p1]) == 0
    assert cli.main(["train", "--config", p2]) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "final.ckpt").read_bytes() == (out2 / "final.ckpt").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = train_config(tmp_path / "out", train={"steps": 5, "lr": 1e100})
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert cli.main(["train", "--config", path]) == 3
    assert "aborted" in capsys.readouterr().err


# --- compile and verify ------------------------------------------------------


def test_compile_and_verify_roundtrip(tmp_path, capsys):
    out = tmp_path / "c"
    fsa_path = tmp_path / "parity.fsa"
    ft.save_fsa(fsa_path, ft.make_parity())
    assert cli.main(["compile", "--fsa", str(fsa_path), "--out", str(out)]) == 0
    ckpt = out / "compiled.ckpt"
    assert ckpt.is_file()
    code = cli.main(["verify", "--fsa", str(fsa_path), "--ckpt", str(ckpt),
                     "--words", "50", "--max-len", "1000", "--seed", "0"])
    assert code == 0
    assert "PASS" in capsys.readouterr().out


def test_compile_builtin_task_and_group(tmp_path):
    out = tmp_path / "z5"
    assert cli.main(["compile", "--task", "Z5", "--out", str(out)]) == 0
    assert cli.main(["verify", "--fsa", str(out / "task.fsa"),
                     "--ckpt", str(out / "compiled.ckpt"),
                     "--words", "20", "--max-len", "60"]) == 0


def test_verify_single_state_fsa_passes(tmp_path):
    out = tmp_path / "one"
    fsa_path = tmp_path / "one.fsa"
    ft.save_fsa(fsa_path, ft.Fsa(num_states=1, num_symbols=2,
                                 delta=np.zeros((1, 2), dtype=np.int64), q_init=0))
    assert cli.main(["compile", "--fsa", str(fsa_path), "--out", str(out)]) == 0
    assert cli.main(["verify", "--fsa", str(fsa_path),
                     "--ckpt", str(out / "compiled.ckpt"), "--words", "10",
                     "--max-len", "30"]) == 0


def test_verify_fails_on_corrupted_checkpoint(tmp_path, capsys):
    out = tmp_path / "c"
    fsa_path = tmp_path / "parity.fsa"
    ft.save_fsa(fsa_path, ft.make_parity())
    cli.main(["compile", "--fsa", str(fsa_path), "--out", str(out)])
    ckpt = out / "compiled.ckpt"
    blob = bytearray(ckpt.read_bytes())

    # header corruption: unreadable checkpoint
    bad_head = tmp_path / "head.ckpt"
    head = bytearray(blob)
    head[0] ^= 0xFF
    bad_head.write_bytes(bytes(head))
    assert cli.main(["verify", "--fsa", str(fsa_path), "--ckpt", str(bad_head),
                     "--words", "5", "--max-len", "20"]) == 4
    assert "FAIL" in capsys.readouterr().out

    # wrong weights in a well-formed file: loads fine, replays wrong
    bad_tail = tmp_path / "tail.ckpt"
    tampered = md.load_checkpoint(ckpt, ft.compile_to_ssm(ft.make_parity()).config)
    tampered.x0_re[1] = 1e9
    tampered.bump()
    md.save_checkpoint(bad_tail, tampered)
    assert cli.main(["verify", "--fsa", str(fsa_path), "--ckpt", str(bad_tail),
                     "--words", "5", "--max-len", "20"]) == 4
    assert "word" in capsys.readouterr().out


def test_compile_parse_error_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.fsa"
    bad.write_text("states 2 alphabet 2 init 0\n0 1\n", encoding="utf-8")
    assert cli.main(["compile", "--fsa", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line" in capsys.readouterr().err


# --- eval --------------------------------------------------------------------


def test_eval_compiled_checkpoint_is_exact(tmp_path, capsys):
    out = tmp_path / "c"
    cli.main(["compile", "--task", "parity", "--out", str(out)])
    cfg = {"seed": 0, "task": {"name": "parity"},
           "checkpoint": str(out / "compiled.ckpt"),
           "eval": {"lengths": [5, 20], "n_per_length": 32}}
    path = write_yaml(tmp_path / "e.yaml", cfg)
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "eval.csv").read_text().splitlines()
    assert lines[0] == "length,accuracy"
    assert lines[1] == "5,1.0" and lines[2] == "20,1.0"


def test_eval_untrained_checkpoint_near_chance(tmp_path):
    out = tmp_path / "run"
    path = write_yaml(tmp_path / "c.yaml",
                      train_config(out, train={"steps": 0}))
    cli.main(["train", "--config", path])
    cfg = {"seed": 0, "task": {"name": "parity"},
           "model": {"dim": 6, "state": 8, "bank": 2, "hidden": 8},
           "checkpoint": str(out / "final.ckpt"),
           "eval": {"lengths": [10], "n_per_length": 64}}
    epath = write_yaml(tmp_path / "e.yaml", cfg)
    assert cli.main(["eval", "--config", epath, "--out", str(tmp_path / "e")]) == 0
    acc = float((tmp_path / "e" / "eval.csv").read_text().splitlines()[1].split(",")[1])
    assert 0.0 <= acc <= 1.0


def test_eval_shape_mismatch_is_config_error(tmp_path):
    out = tmp_path / "c"
    cli.main(["compile", "--task", "parity", "--out", str(out)])
    cfg = {"seed": 0, "task": {"name": "cycle_nav"},
           "checkpoint": str(out / "compiled.ckpt"),
           "eval": {"lengths": [5], "n_per_length": 8}}
    path = write_yaml(tmp_path / "e.yaml", cfg)
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "e")]) == 2


def test_eval_missing_checkpoint(tmp_path):
    cfg = {"seed": 0, "task": {"name": "parity"},
           "checkpoint": str(tmp_path / "none.ckpt"),
           "eval": {"lengths": [5], "n_per_length": 8}}
    path = write_yaml(tmp_path / "e.yaml", cfg)
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "e")]) == 2


# --- bench -------------------------------------------------------------------


def test_bench_smoke(tmp_path):
    cfg = {"seed": 0,
           "bench": {"structure": ["pd"], "n_grid": [4], "l_grid": [8],
                     "reps": 3, "warmup": 0}}
    path = write_yaml(tmp_path / "b.yaml", cfg)
    assert cli.main(["bench", "--config", path, "--out", str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert lines[0] == "structure,N,L,batch,workers,median_s,iqr_s"
    assert len(lines) == 2


def test_bench_skipped_cell_reported_not_fatal(tmp_path):
    cfg = {"seed": 0,
           "bench": {"structure": ["dense"], "n_grid": [64], "l_grid": [32],
                     "reps": 3, "warmup": 0, "mem_budget": 1024}}
    path = write_yaml(tmp_path / "b.yaml", cfg)
    assert cli.main(["bench", "--config", path, "--out", str(tmp_path / "b")]) == 0
    assert ",,," not in (tmp_path / "b" / "bench.csv").read_text().splitlines()[0]


def test_ordering_check_helper():
    import pdssm.bench as bn

    def row(structure, n, med):
        return bn.BenchRow(structure=structure, n=n, l=64, batch=1, workers=1,
                           median_s=med, iqr_s=0.0)

    good = [row("diagonal", 128, 1.0), row("pd", 128, 2.0), row("dense", 128, 3.0),
            row("diagonal", 32, 9.0), row("pd", 32, 1.0)]  # N < 128 exempt
    assert cli._ordering_violations(good) == []
    bad = [row("diagonal", 128, 2.0), row("pd", 128, 1.0), row("dense", 128, 3.0)]
    msgs = cli._ordering_violations(bad)
    assert len(msgs) == 1 and "128" in msgs[0]


def test_bench_assert_ordering_vacuous_on_tiny_grid(tmp_path):
    cfg = {"seed": 0,
           "bench": {"structure": ["pd", "diagonal"], "n_grid": [4],
                     "l_grid": [8], "reps": 3, "warmup": 0}}
    path = write_yaml(tmp_path / "b.yaml", cfg)
    assert cli.main(["bench", "--config", path, "--out", str(tmp_path / "b"),
                     "--assert-ordering"]) == 0


# --- process-level entry -----------------------------------------------------


def test_module_subprocess_smoke(tmp_path):
    out = tmp_path / "sub"
    proc = subprocess.run([sys.executable, "-m", "pdssm.cli", "compile",
                           "--task", "parity", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "compiled.ckpt").is_file()


def test_console_script_installed():
    exe = shutil.which("pdssm")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "bench" in proc.stdout
