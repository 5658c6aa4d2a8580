"""Training orchestration: teacher pretraining, distillation, SGD, checkpoints.

Checkpoint files start with the magic ``DCDC`` and a little-endian
version word, followed by a JSON metadata block and named float64/
float32/int64 tensors with little-endian payloads.  Writes are atomic
(temp file + rename) and loads round-trip every tensor bitwise.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tape, collect_grads
from .data import BatchPlan, Dataset, batches, channel_stats, eval_batches
from .errors import CheckpointFormatError, ConfigError, DivergenceError
from .losses import DistillConfig, EmbeddingPair, cross_entropy_loss, \
    temperature_parameters, total_loss
from .models import Model, ModelSpec, ProjectionHead, init_weights, project

CHECKPOINT_MAGIC = b"DCDC"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {0: "<f8", 1: "<f4", 2: "<i8"}
_TAG_FOR_KIND = {"f8": 0, "f4": 1, "i8": 2}

EPOCH_CSV_COLUMNS = ("epoch", "sup", "distill_kl", "contrast", "consist", "total",
                     "tau", "b", "train_acc", "test_acc")


@dataclass(frozen=True)
class OptimSpec:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: tuple[tuple[int, float], ...] = ()
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        marks = [e for e, _ in self.schedule]
        if marks != sorted(set(marks)):
            raise ConfigError("schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for mark, mult in self.schedule:
            if epoch >= mark:
                lr *= mult
        return lr

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "schedule": [list(s) for s in self.schedule], "epochs": self.epochs,
                "seed": self.seed}


def sgd_step(params: list[Parameter], lr: float, momentum: float, weight_decay: float,
             state: dict[int, np.ndarray]) -> None:
    """v <- momentum*v + g + wd*p; p <- p - lr*v; then clamp where bounds exist.

    Parameters flagged ``decay=False`` (the temperature scalars) skip
    weight decay.  Parameters without a gradient are left untouched.
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay != 0.0 and p.decay:
            g = g + weight_decay * p.value.data
        v = state.get(id(p))
        v = g if v is None else momentum * v + g
        state[id(p)] = v
        p.value.data -= lr * v
        p.clamp()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", ckpt.version)
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(meta))
    blob += meta
    blob += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        kind = {"float64": "f8", "float32": "f4", "int64": "i8"}.get(arr.dtype.name)
        if kind is None:
            raise ConfigError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _TAG_FOR_KIND[kind], arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype(_DTYPE_TAGS[_TAG_FOR_KIND[kind]]).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError("truncated checkpoint", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", offset=0)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", offset=4)
    (meta_len,) = r.unpack("<Q")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag}", offset=r.pos - 2)
        shape = tuple(r.unpack("<" + "I" * ndim)) if ndim else ()
        dtype = np.dtype(_DTYPE_TAGS[tag])
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(raw):
        raise CheckpointFormatError("trailing bytes after final tensor", offset=r.pos)
    return Checkpoint(tensors, metadata, version)


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    return {p.name: p.value.data.copy() for p in model.parameters()}


def restore_model(ckpt: Checkpoint, spec_key: str = "model_spec") -> Model:
    spec = ModelSpec.from_dict(ckpt.metadata[spec_key])
    model = init_weights(spec, int(ckpt.metadata.get("seed", 0)))
    for p in model.parameters():
        stored = ckpt.tensors.get(p.name)
        if stored is None:
            raise CheckpointFormatError(f"checkpoint is missing tensor {p.name!r}")
        if stored.shape != p.value.shape:
            raise CheckpointFormatError(
                f"tensor {p.name!r} has shape {stored.shape}, expected {p.value.shape}")
        p.value.data[...] = stored
    return model


def stats_from_metadata(metadata: dict) -> tuple[np.ndarray, np.ndarray]:
    return (np.asarray(metadata["channel_mean"], dtype=np.float64),
            np.asarray(metadata["channel_std"], dtype=np.float64))


@dataclass
class EpochLog:
    epoch: int
    sup: float = 0.0
    distill_kl: float = 0.0
    contrast: float = 0.0
    consist: float = 0.0
    total: float = 0.0
    tau: float = 0.0
    b: float = 0.0
    train_acc: float = 0.0
    test_acc: float = 0.0

    def row(self) -> list:
        return [self.epoch, self.sup, self.distill_kl, self.contrast, self.consist,
                self.total, self.tau, self.b, self.train_acc, self.test_acc]


def write_epoch_csv(logs: list[EpochLog], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(EPOCH_CSV_COLUMNS) + "\n")
        for log in logs:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v)
                              for v in log.row()) + "\n")


def evaluate(model: Model, dataset: Dataset, stats, batch_size: int = 256) -> float:
    """Top-1 accuracy (%) over an in-order unaugmented pass."""
    hits = 0
    for batch in eval_batches(dataset, stats, batch_size):
        _, logits = model.forward(batch.images)
        hits += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return 100.0 * hits / len(dataset)


def train_teacher(spec: ModelSpec, train: Dataset, test: Dataset, optim: OptimSpec,
                  plan: BatchPlan | None = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Supervised cross-entropy training; deterministic per (seed, config, data)."""
    plan = plan or BatchPlan(batch_size=128, shuffle_seed=optim.seed)
    model = init_weights(spec, optim.seed)
    params = model.parameters()
    stats = channel_stats(train)
    state: dict[int, np.ndarray] = {}
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(optim.epochs):
        lr = optim.lr_at(epoch)
        running, seen = 0.0, 0
        for batch in batches(train, plan, epoch, stats):
            with Tape() as tape:
                _, logits = model.forward(batch.images)
                loss = cross_entropy_loss(logits, batch.labels)
                if not loss.is_finite():
                    raise DivergenceError("supervised loss is non-finite", step)
                tape.backward(loss)
            collect_grads(tape, params)
            sgd_step(params, lr, optim.momentum, optim.weight_decay, state)
            running += loss.item() * len(batch.labels)
            seen += len(batch.labels)
            step += 1
        log = EpochLog(epoch, sup=running / max(seen, 1), total=running / max(seen, 1),
                       train_acc=evaluate(model, train, stats, plan.batch_size),
                       test_acc=evaluate(model, test, stats, plan.batch_size))
        logs.append(log)
    final_train = evaluate(model, train, stats, plan.batch_size)
    final_test = evaluate(model, test, stats, plan.batch_size)
    metadata = {
        "kind": "teacher",
        "model_spec": spec.to_dict(),
        "optim": optim.to_dict(),
        "seed": optim.seed,
        "channel_mean": [float(v) for v in stats[0]],
        "channel_std": [float(v) for v in stats[1]],
        "final_metrics": {"train_acc": final_train, "test_acc": final_test},
    }
    return Checkpoint(model_tensors(model), metadata), logs


def _supervised_breakdown(s_logits, t_logits, labels, cfg: DistillConfig):
    from .autodiff import Tensor, add, scale
    from .losses import LossBreakdown, kd_kl_loss

    sup = cross_entropy_loss(s_logits, labels)
    distill_kl = kd_kl_loss(s_logits, t_logits, cfg.kd_temperature)
    zero = Tensor(0.0)
    total = sup if cfg.lambda_kl == 0.0 else add(sup, scale(distill_kl, cfg.lambda_kl))
    return LossBreakdown(sup, distill_kl, zero, zero, zero, total)


def distill(teacher_ckpt: Checkpoint, student_spec: ModelSpec, train: Dataset, test: Dataset,
            cfg: DistillConfig, optim: OptimSpec, plan: BatchPlan | None = None,
            ) -> tuple[Checkpoint, list[EpochLog]]:
    """Optimize the student, both projection heads, tau and b under the
    combined objective; the teacher backbone stays frozen."""
    plan = plan or BatchPlan(batch_size=128, shuffle_seed=optim.seed)
    teacher = restore_model(teacher_ckpt)
    if "channel_mean" in teacher_ckpt.metadata:
        stats = stats_from_metadata(teacher_ckpt.metadata)
    else:
        stats = channel_stats(train)
    student = init_weights(student_spec, optim.seed)
    t_head = ProjectionHead.create(teacher.spec.feature_dim, cfg.proj_dim, "teacher",
                                   [optim.seed, 1])
    s_head = ProjectionHead.create(student_spec.feature_dim, cfg.proj_dim, "student",
                                   [optim.seed, 2])
    tau, b = temperature_parameters(cfg)
    params = student.parameters() + [t_head.weight, s_head.weight]
    if cfg.learn_temperature:
        params += [tau, b]
    state: dict[int, np.ndarray] = {}
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(optim.epochs):
        lr = optim.lr_at(epoch)
        sums = np.zeros(5)
        seen = 0
        for batch in batches(train, plan, epoch, stats):
            t_feats, t_logits = teacher.forward(batch.images)  # untracked: no tape active
            with Tape() as tape:
                s_feats, s_logits = student.forward(batch.images)
                if cfg.beta != 0.0:
                    zs = project(s_head, s_feats)
                    zt = project(t_head, t_feats)
                    pair = EmbeddingPair(zs, zt)
                    bd = total_loss(s_logits, t_logits, batch.labels, pair, tau, b, cfg)
                else:
                    # the projection pipeline is unused at beta=0; skipping it
                    # keeps the reduced objectives exact and robust
                    bd = _supervised_breakdown(s_logits, t_logits, batch.labels, cfg)
                if not bd.total.is_finite():
                    raise DivergenceError("distillation loss is non-finite", step)
                tape.backward(bd.total)
            collect_grads(tape, params)
            sgd_step(params, lr, optim.momentum, optim.weight_decay, state)
            tau_val = float(tau.value.data)
            assert 0.0 <= tau_val <= cfg.tau_max, "temperature escaped its clamp interval"
            n = len(batch.labels)
            f = bd.as_floats()
            sums += n * np.array([f["sup"], f["distill_kl"], f["contrast"], f["consist"],
                                  f["total"]])
            seen += n
            step += 1
        means = sums / max(seen, 1)
        logs.append(EpochLog(epoch, sup=means[0], distill_kl=means[1], contrast=means[2],
                             consist=means[3], total=means[4], tau=float(tau.value.data),
                             b=float(b.value.data),
                             train_acc=evaluate(student, train, stats, plan.batch_size),
                             test_acc=evaluate(student, test, stats, plan.batch_size)))
    final_train = evaluate(student, train, stats, plan.batch_size)
    final_test = evaluate(student, test, stats, plan.batch_size)
    tensors = model_tensors(student)
    tensors["head.student.weight"] = s_head.weight.value.data.copy()
    tensors["head.teacher.weight"] = t_head.weight.value.data.copy()
    tensors["temperature.tau"] = tau.value.data.copy()
    tensors["temperature.b"] = b.value.data.copy()
    metadata = {
        "kind": "student",
        "model_spec": student_spec.to_dict(),
        "teacher_spec": teacher.spec.to_dict(),
        "distill_config": {
            "alpha": cfg.alpha, "beta": cfg.beta, "lambda_kl": cfg.lambda_kl,
            "tau_init": cfg.tau_init, "b_init": cfg.b_init, "tau_max": cfg.tau_max,
            "kd_temperature": cfg.kd_temperature, "proj_dim": cfg.proj_dim,
            "learn_temperature": cfg.learn_temperature,
            "detach_consistency_target": cfg.detach_consistency_target,
        },
        "optim": optim.to_dict(),
        "seed": optim.seed,
        "channel_mean": [float(v) for v in stats[0]],
        "channel_std": [float(v) for v in stats[1]],
        "final_metrics": {"train_acc": final_train, "test_acc": final_test,
                          "tau": float(tau.value.data), "b": float(b.value.data)},
    }
    return Checkpoint(tensors, metadata), logs


def restore_student_head(ckpt: Checkpoint) -> ProjectionHead:
    w = ckpt.tensors.get("head.student.weight")
    if w is None:
        raise CheckpointFormatError("checkpoint has no student projection head")
    head = ProjectionHead(Parameter(w.copy(), name="head.student.weight"), "student")
    return head
