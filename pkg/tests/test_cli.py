"""CLI subcommands: config precedence, run artifacts, exit codes."""

import os

import numpy as np
import pytest

from dcd.cli import (EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, parse_grid,
                     resolve_config)
from dcd.errors import ConfigError

FAST = ["--set", "epochs=2", "--set", "blob_train_per_class=40",
        "--set", "blob_test_per_class=30", "--set", "blob_dim=8",
        "--set", "blob_std=0.02", "--set", "batch_size=32",
        "--set", "teacher_widths=32,32", "--set", "student_widths=16,16",
        "--set", "proj_dim=4", "--set", "lr=0.05", "--set", "schedule=",
        "--set", "blob_classes=2"]


def run_dir_complete(path):
    return all(os.path.exists(os.path.join(path, f))
               for f in ("config.txt", "epochs.csv", "DONE"))


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs") / "teacher")
    code = main(["train-teacher", "--out", out, "--seed", "1"] + FAST)
    assert code == EXIT_OK
    return out


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nalpha=0.9\nlr=0.2\n")
    cfg = resolve_config(str(cfg_file), {"lr": "0.3"})
    assert cfg["alpha"] == 0.9   # file value survives
    assert cfg["lr"] == 0.3      # flag override wins
    assert cfg["beta"] == 1.0    # default


def test_unknown_key_rejected_by_name(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("warp_speed=9\n")
    with pytest.raises(ConfigError) as err:
        resolve_config(str(cfg_file), {})
    assert "warp_speed" in str(err.value)


def test_unknown_set_key_exits_config(tmp_path):
    out = str(tmp_path / "x")
    code = main(["train-teacher", "--out", out, "--set", "bogus=1"])
    assert code == EXIT_CONFIG
    code = main(["train-teacher", "--out", out, "--config", str(tmp_path / "missing.cfg")])
    assert code == EXIT_CONFIG


def test_teacher_run_artifacts(teacher_run):
    assert run_dir_complete(teacher_run)
    assert os.path.exists(os.path.join(teacher_run, "teacher.ckpt"))
    echoed = open(os.path.join(teacher_run, "config.txt")).read()
    assert "seed=1" in echoed and "epochs=2" in echoed


def test_missing_data_path_exits_data(tmp_path):
    out = str(tmp_path / "x")
    code = main(["train-teacher", "--out", out, "--set", "dataset=cifar10",
                 "--data", str(tmp_path / "nowhere")])
    assert code == EXIT_DATA


def test_teacher_determinism_same_seed(tmp_path):
    logs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["train-teacher", "--out", out, "--seed", "5"] + FAST) == EXIT_OK
        logs.append(open(os.path.join(out, "epochs.csv")).read())
    assert logs[0] == logs[1]


def test_distill_and_eval_and_transfer(teacher_run, tmp_path):
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    out = str(tmp_path / "student")
    code = main(["distill", "--teacher", teacher_ckpt, "--out", out, "--seed", "2",
                 "--alpha", "0.5", "--beta", "1.0", "--lambda", "1.0"] + FAST)
    assert code == EXIT_OK
    assert run_dir_complete(out)
    student_ckpt = os.path.join(out, "student.ckpt")
    assert main(["eval", "--ckpt", student_ckpt] + FAST) == EXIT_OK
    assert main(["transfer", "--ckpt", student_ckpt, "--set", "probe_epochs=3"] + FAST) \
        == EXIT_OK


def test_distill_fixed_tau_mode(teacher_run, tmp_path):
    from dcd.train import load_checkpoint
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    out = str(tmp_path / "fixed")
    code = main(["distill", "--teacher", teacher_ckpt, "--out", out, "--seed", "2",
                 "--fixed-tau", "0.07"] + FAST)
    assert code == EXIT_OK
    ckpt = load_checkpoint(os.path.join(out, "student.ckpt"))
    assert abs(float(ckpt.tensors["temperature.tau"]) - np.log(1 / 0.07)) < 1e-12
    assert float(ckpt.tensors["temperature.b"]) == 0.0


def test_distill_bad_checkpoint_exits_4(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNKJUNK")
    out = str(tmp_path / "student")
    code = main(["distill", "--teacher", str(bad), "--out", out] + FAST)
    assert code == EXIT_CHECKPOINT


def test_transfer_dimension_mismatch_message(teacher_run, tmp_path, capsys):
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    code = main(["transfer", "--ckpt", teacher_ckpt] + FAST
                + ["--set", "blob_dim=6"])
    assert code == EXIT_CONFIG
    assert "shape" in capsys.readouterr().err


def test_parse_grid():
    cells = parse_grid("alpha=0.1,0.5|beta=1,100")
    assert len(cells) == 4
    assert {"alpha": 0.1, "beta": 1.0} in cells
    with pytest.raises(ConfigError):
        parse_grid("gamma=1")
    assert parse_grid("beta=1") == [{"beta": 1.0}]


def test_ablate_summary_rows(teacher_run, tmp_path):
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    out = str(tmp_path / "abl")
    code = main(["ablate", "--teacher", teacher_ckpt, "--out", out,
                 "--grid", "beta=0.5,1", "--seeds", "2", "--jobs", "2"] + FAST)
    assert code == EXIT_OK
    lines = open(os.path.join(out, "summary.csv")).read().strip().splitlines()
    assert lines[0].startswith("cell,alpha,beta,lambda_kl,seed,test_acc")
    assert len(lines) - 1 == 2 * 2  # |grid| x seeds
    for cell in ("cell0-seed0", "cell0-seed1", "cell1-seed0", "cell1-seed1"):
        assert run_dir_complete(os.path.join(out, cell))


def test_single_cell_grid_matches_plain_distill(teacher_run, tmp_path):
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    out_abl = str(tmp_path / "abl1")
    assert main(["ablate", "--teacher", teacher_ckpt, "--out", out_abl,
                 "--grid", "beta=1.0", "--seeds", "1", "--seed", "3"] + FAST) == EXIT_OK
    out_plain = str(tmp_path / "plain")
    assert main(["distill", "--teacher", teacher_ckpt, "--out", out_plain,
                 "--seed", "3", "--beta", "1.0"] + FAST) == EXIT_OK
    abl_csv = open(os.path.join(out_abl, "cell0-seed0", "epochs.csv")).read()
    plain_csv = open(os.path.join(out_plain, "epochs.csv")).read()
    assert abl_csv == plain_csv


def test_export_embeddings_cmd(teacher_run, tmp_path):
    teacher_ckpt = os.path.join(teacher_run, "teacher.ckpt")
    out = str(tmp_path / "student")
    assert main(["distill", "--teacher", teacher_ckpt, "--out", out,
                 "--seed", "2"] + FAST) == EXIT_OK
    csv_path = str(tmp_path / "emb.csv")
    code = main(["export-embeddings", "--ckpt", os.path.join(out, "student.ckpt"),
                 "--csv", csv_path] + FAST)
    assert code == EXIT_OK
    lines = open(csv_path).read().strip().splitlines()
    assert lines[0].startswith("label,e0")
    assert len(lines) - 1 == 60  # test split row count


def test_cifar10_cli_path_with_constructed_binaries(tmp_path):
    """Full CLI run over the cifar10 loader using synthetic binary batches."""
    from dcd.data import Dataset, serialize_cifar10
    rng = np.random.default_rng(0)
    data_dir = tmp_path / "cifar"
    data_dir.mkdir()
    for i in range(1, 6):
        images = (rng.integers(0, 256, (8, 3, 32, 32)) / 255.0).astype(np.float32)
        ds = Dataset(images, rng.integers(0, 10, 8), 10, "x")
        (data_dir / f"data_batch_{i}.bin").write_bytes(serialize_cifar10(ds))
    test_images = (rng.integers(0, 256, (8, 3, 32, 32)) / 255.0).astype(np.float32)
    (data_dir / "test_batch.bin").write_bytes(
        serialize_cifar10(Dataset(test_images, rng.integers(0, 10, 8), 10, "x")))
    out = str(tmp_path / "teacher")
    code = main(["train-teacher", "--out", out, "--data", str(data_dir), "--seed", "1",
                 "--set", "dataset=cifar10", "--set", "teacher_family=convnet",
                 "--set", "teacher_widths=2,3", "--set", "epochs=1",
                 "--set", "batch_size=16", "--set", "train_limit=24",
                 "--set", "lr=0.01", "--set", "schedule=", "--set", "augment=flip+crop"])
    assert code == EXIT_OK
    assert run_dir_complete(out)


def test_verify_command_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "relative_improvement: 20.31" in out
    assert "[FAIL]" not in out
