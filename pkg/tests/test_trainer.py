"""SGD semantics, training determinism, checkpoint format, frozen-teacher."""

import os

import numpy as np
import pytest

from dcd.autodiff import Parameter
from dcd.data import BatchPlan, synth_blob_split
from dcd.errors import CheckpointFormatError, ConfigError
from dcd.losses import DistillConfig
from dcd.models import ModelSpec
from dcd.train import (Checkpoint, OptimSpec, distill, load_checkpoint, restore_model,
                       save_checkpoint, sgd_step, train_teacher, write_epoch_csv)


def test_optim_spec_validation():
    with pytest.raises(ConfigError):
        OptimSpec(lr=0.0)
    with pytest.raises(ConfigError):
        OptimSpec(lr=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        OptimSpec(lr=0.1, schedule=((5, 0.1), (5, 0.1)))
    spec = OptimSpec(lr=0.1, schedule=((2, 0.1), (4, 0.5)))
    assert spec.lr_at(0) == 0.1
    assert abs(spec.lr_at(2) - 0.01) < 1e-15
    assert abs(spec.lr_at(4) - 0.005) < 1e-15


def test_sgd_plain_step():
    p = Parameter(np.asarray([1.0, 2.0]), name="p")
    p.grad = np.asarray([0.5, -0.5])
    sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0, state={})
    assert np.allclose(p.value.data, [0.95, 2.05], atol=1e-15)


def test_sgd_no_grad_no_motion():
    p = Parameter(np.asarray([1.0]), name="p")
    p.grad = None
    state = {}
    sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0, state=state)
    assert np.array_equal(p.value.data, [1.0])
    assert state == {}


def test_sgd_two_steps_match_hand_unroll():
    lr, mom, wd = 0.1, 0.9, 0.01
    p = Parameter(np.asarray([2.0]), name="p")
    state = {}
    g1, g2 = np.asarray([0.3]), np.asarray([-0.2])

    p.grad = g1.copy()
    sgd_step([p], lr, mom, wd, state)
    p.grad = g2.copy()
    sgd_step([p], lr, mom, wd, state)

    # hand recurrence: v <- mom*v + g + wd*p; p <- p - lr*v
    ph, v = 2.0, 0.0
    for g in (g1[0], g2[0]):
        v = mom * v + g + wd * ph
        ph = ph - lr * v
    assert abs(p.value.data[0] - ph) < 1e-15


def test_sgd_skips_decay_for_flagged_params():
    p = Parameter(np.asarray([1.0]), name="tau", decay=False)
    p.grad = np.asarray([0.0])
    sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.5, state={})
    assert np.array_equal(p.value.data, [1.0])


def test_sgd_clamps_bounded_params():
    p = Parameter(np.asarray(9.99), name="tau", bounds=(0.0, 10.0), decay=False)
    p.grad = np.asarray(-100.0)
    sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0, state={})
    assert float(p.value.data) == 10.0


@pytest.fixture(scope="module")
def blob_env():
    train, test = synth_blob_split(2, 60, 40, 8, seed=17, std=0.02, separation=0.3)
    teacher_spec = ModelSpec("mlp", (32, 32), 2, (1, 1, 8))
    student_spec = ModelSpec("mlp", (16, 16), 2, (1, 1, 8))
    return train, test, teacher_spec, student_spec


def test_teacher_reaches_full_accuracy_on_separable_blobs(blob_env):
    train, test, teacher_spec, _ = blob_env
    optim = OptimSpec(lr=0.1, epochs=8, seed=0)
    ckpt, logs = train_teacher(teacher_spec, train, test, optim, BatchPlan(32, 0))
    assert ckpt.metadata["final_metrics"]["test_acc"] == 100.0
    assert len(logs) == 8
    assert logs[-1].total < logs[0].total


def test_zero_epochs_returns_initialized_weights(blob_env):
    train, test, teacher_spec, _ = blob_env
    optim = OptimSpec(lr=0.1, epochs=0, seed=0)
    ckpt, logs = train_teacher(teacher_spec, train, test, optim, BatchPlan(32, 0))
    assert logs == []
    acc = ckpt.metadata["final_metrics"]["test_acc"]
    assert 20.0 <= acc <= 80.0  # near-chance for 2 classes
    from dcd.models import init_weights
    fresh = init_weights(teacher_spec, 0)
    for p in fresh.parameters():
        assert np.array_equal(ckpt.tensors[p.name], p.value.data)


def test_teacher_training_deterministic_bytes(blob_env, tmp_path):
    train, test, teacher_spec, _ = blob_env
    optim = OptimSpec(lr=0.1, epochs=3, seed=9)
    paths = []
    for i in range(2):
        ckpt, _ = train_teacher(teacher_spec, train, test, optim, BatchPlan(32, 9))
        path = tmp_path / f"t{i}.ckpt"
        save_checkpoint(ckpt, str(path))
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_distill_beta_lambda_zero_equals_vanilla_training(blob_env):
    """beta=0, lambda=0 must reproduce plain supervised training bitwise."""
    train, test, teacher_spec, student_spec = blob_env
    t_optim = OptimSpec(lr=0.1, epochs=3, seed=1)
    t_ckpt, _ = train_teacher(teacher_spec, train, test, t_optim, BatchPlan(32, 1))
    s_optim = OptimSpec(lr=0.05, epochs=3, seed=2)
    cfg = DistillConfig(beta=0.0, lambda_kl=0.0, proj_dim=4)
    via_distill, logs = distill(t_ckpt, student_spec, train, test, cfg, s_optim,
                                BatchPlan(32, 2))
    direct, _ = train_teacher(student_spec, train, test, s_optim, BatchPlan(32, 2))
    for p_name in direct.tensors:
        assert np.array_equal(via_distill.tensors[p_name], direct.tensors[p_name]), p_name
    for log in logs:
        assert log.contrast == 0.0 and log.consist == 0.0
        assert log.total == log.sup


def test_distill_trains_temperature_and_freezes_teacher(blob_env):
    train, test, teacher_spec, student_spec = blob_env
    t_ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=3, seed=1),
                              BatchPlan(32, 1))
    frozen = {k: v.copy() for k, v in t_ckpt.tensors.items()}
    cfg = DistillConfig(proj_dim=4)
    ckpt, logs = distill(t_ckpt, student_spec, train, test, cfg,
                         OptimSpec(lr=0.02, epochs=3, seed=3), BatchPlan(32, 3))
    tau = float(ckpt.tensors["temperature.tau"])
    assert 0.0 <= tau <= cfg.tau_max
    assert tau != cfg.tau_init  # it moved
    for name, arr in frozen.items():
        assert np.array_equal(t_ckpt.tensors[name], arr)
    assert {"head.student.weight", "head.teacher.weight"} <= set(ckpt.tensors)
    assert all(np.isfinite(log.total) for log in logs)


def test_distill_fixed_temperature_mode(blob_env):
    train, test, teacher_spec, student_spec = blob_env
    t_ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=2, seed=1),
                              BatchPlan(32, 1))
    cfg = DistillConfig(proj_dim=4, learn_temperature=False, tau_init=float(np.log(1 / 0.07)))
    ckpt, _ = distill(t_ckpt, student_spec, train, test, cfg,
                      OptimSpec(lr=0.02, epochs=2, seed=3), BatchPlan(32, 3))
    assert float(ckpt.tensors["temperature.tau"]) == cfg.tau_init
    assert float(ckpt.tensors["temperature.b"]) == 0.0


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    tensors = {
        "w": rng.normal(size=(4, 5)),
        "scalar": np.asarray(3.25),
        "ints": rng.integers(-5, 5, 7).astype(np.int64),
        "f32": rng.normal(size=(2, 3)).astype(np.float32),
    }
    ckpt = Checkpoint(tensors, {"nested": {"a": [1, 2]}, "x": "y"})
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(ckpt, path)
    again = load_checkpoint(path)
    assert again.metadata == ckpt.metadata
    assert list(again.tensors) == list(ckpt.tensors)
    for name, arr in tensors.items():
        assert again.tensors[name].dtype == arr.dtype
        assert np.array_equal(again.tensors[name], arr)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointFormatError) as err:
        load_checkpoint(str(path))
    assert err.value.offset == 0


def test_checkpoint_truncation_offset(tmp_path, rng):
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(Checkpoint({"w": rng.normal(size=(8, 8))}, {}), path)
    raw = open(path, "rb").read()
    cut = len(raw) - 16
    with open(path, "wb") as fh:
        fh.write(raw[:cut])
    with pytest.raises(CheckpointFormatError) as err:
        load_checkpoint(path)
    assert err.value.offset is not None and err.value.offset <= cut


def test_checkpoint_feeds_distill_like_memory_handoff(blob_env, tmp_path):
    train, test, teacher_spec, student_spec = blob_env
    t_ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=2, seed=5),
                              BatchPlan(32, 5))
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(t_ckpt, path)
    reloaded = load_checkpoint(path)
    cfg = DistillConfig(proj_dim=4)
    optim = OptimSpec(lr=0.02, epochs=2, seed=6)
    a, _ = distill(t_ckpt, student_spec, train, test, cfg, optim, BatchPlan(32, 6))
    b, _ = distill(reloaded, student_spec, train, test, cfg, optim, BatchPlan(32, 6))
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_restore_model_round_trip(blob_env, tmp_path):
    train, test, teacher_spec, _ = blob_env
    ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=1, seed=2),
                            BatchPlan(32, 2))
    model = restore_model(ckpt)
    for p in model.parameters():
        assert np.array_equal(p.value.data, ckpt.tensors[p.name])


def test_restore_model_missing_tensor(blob_env):
    train, test, teacher_spec, _ = blob_env
    ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=0, seed=2),
                            BatchPlan(32, 2))
    del ckpt.tensors["model.classifier.bias"]
    with pytest.raises(CheckpointFormatError):
        restore_model(ckpt)


def test_convnet_distillation_end_to_end(rng):
    """Tiny image pipeline: conv teacher/student, augmentation, projections."""
    from dcd.data import Dataset
    images = rng.uniform(0, 1, (48, 2, 8, 8)).astype(np.float32)
    # class 0: bright top half; class 1: bright bottom half
    labels = rng.integers(0, 2, 48)
    images[labels == 0, :, :4, :] += 1.0
    images[labels == 1, :, 4:, :] += 1.0
    images = np.clip(images, 0, 2) / 2.0
    train = Dataset(images[:32], labels[:32], 2, "synthimg-train")
    test = Dataset(images[32:], labels[32:], 2, "synthimg-test")
    teacher_spec = ModelSpec("convnet", (6, 8), 2, (2, 8, 8))
    student_spec = ModelSpec("convnet", (3, 4), 2, (2, 8, 8))
    t_ckpt, _ = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=4, seed=0),
                              BatchPlan(16, 0, augment="flip+crop"))
    cfg = DistillConfig(proj_dim=4)
    ckpt, logs = distill(t_ckpt, student_spec, train, test, cfg,
                         OptimSpec(lr=0.05, epochs=4, seed=1),
                         BatchPlan(16, 1, augment="flip"))
    assert all(np.isfinite(log.total) for log in logs)
    assert logs[-1].total < logs[0].total
    assert ckpt.metadata["final_metrics"]["test_acc"] >= 50.0
    assert 0.0 <= float(ckpt.tensors["temperature.tau"]) <= cfg.tau_max


def test_distill_monotone_sanity_on_shipped_blob_recipe():
    from dcd import recipes
    teacher_train, student_train, test = recipes.blob_trend_datasets()
    teacher_spec, student_spec = recipes.blob_model_pair()
    t_ckpt, t_logs = train_teacher(teacher_spec, teacher_train, test,
                                   recipes.BLOB_TEACHER_OPTIM, recipes.BLOB_TEACHER_PLAN)
    assert t_logs[-1].total < t_logs[0].total
    ckpt, logs = distill(t_ckpt, student_spec, student_train, test,
                         recipes.blob_distill_config(),
                         recipes.blob_student_optim(0), recipes.blob_student_plan(0))
    assert logs[-1].total < logs[0].total


def test_epoch_csv_schema(tmp_path, blob_env):
    train, test, teacher_spec, _ = blob_env
    _, logs = train_teacher(teacher_spec, train, test, OptimSpec(lr=0.1, epochs=2, seed=2),
                            BatchPlan(32, 2))
    path = str(tmp_path / "epochs.csv")
    write_epoch_csv(logs, path)
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "epoch,sup,distill_kl,contrast,consist,total,tau,b,train_acc,test_acc"
    assert len(lines) == 3
