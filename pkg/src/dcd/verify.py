"""Built-in verification suite: oracle equivalence, gradient checks,
structural invariants, fixture reproduction and format round-trips.

Each check returns a result record; the CLI prints one line per check
and exits nonzero if any failed.  Checks are deliberately fast (the
whole suite runs in well under a minute).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import oracle
from .autodiff import Tape, Tensor, collect_grads
from .data import (BatchPlan, Dataset, parse_cifar10, parse_cifar100, parse_mnist_idx,
                   serialize_cifar10, serialize_cifar100, serialize_mnist_idx,
                   synth_blob_split)
from .losses import (DistillConfig, EmbeddingPair, consistency_loss, contrastive_loss,
                     cross_entropy_loss, kd_kl_loss, student_distribution,
                     teacher_distribution, temperature_parameters, total_loss)
from .metrics import (fixture_relative_improvement, negative_buffer_bytes,
                      read_embeddings, export_embeddings)
from .models import ModelSpec, ProjectionHead, init_weights, project
from .train import (Checkpoint, OptimSpec, distill, load_checkpoint, save_checkpoint,
                    train_teacher)

LOSS_TOL = 1e-12          # absolute for O(1) values, relative above that
GRAD_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _loss_close(a: float, b: float, tol: float = LOSS_TOL) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _unit_rows(rng, n, d):
    z = rng.uniform(-2.0, 2.0, (n, d))
    z[np.linalg.norm(z, axis=1) < 1e-3] += 1.0
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def check_oracle_equivalence(trials: int = 100) -> CheckResult:
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        zs = _unit_rows(rng, n, d)
        zt = _unit_rows(rng, n, d)
        tau = float(rng.uniform(0.0, 10.0))
        b = float(rng.uniform(-1.0, 1.0))
        pair = EmbeddingPair(Tensor(zs), Tensor(zt))
        pairs = [
            (contrastive_loss(pair, tau, b).item(),
             oracle.oracle_contrastive(zs, zt, tau, b).value),
            (consistency_loss(pair, tau, b).item(),
             oracle.oracle_consistency(zs, zt, tau, b).value),
        ]
        c = int(rng.integers(2, 11))
        s_logits = rng.uniform(-4, 4, (n, c))
        t_logits = rng.uniform(-4, 4, (n, c))
        labels = rng.integers(0, c, n)
        pairs.append((kd_kl_loss(Tensor(s_logits), Tensor(t_logits), 4.0).item(),
                      oracle.oracle_kd_kl(s_logits, t_logits, 4.0).value))
        pairs.append((cross_entropy_loss(Tensor(s_logits), labels).item(),
                      oracle.oracle_cross_entropy(s_logits, labels).value))
        for got, want in pairs:
            worst = max(worst, abs(got - want) / max(1.0, abs(got), abs(want)))
            if not _loss_close(got, want):
                return CheckResult("oracle_equivalence", False,
                                   f"mismatch {got!r} vs {want!r}")
    return CheckResult("oracle_equivalence", True, f"{trials} instances, worst {worst:.2e}")


def _mlp_distill_setup(seed=5):
    rng = np.random.default_rng(seed)
    student_spec = ModelSpec("mlp", (8, 8), 3, (1, 1, 6))
    teacher_spec = ModelSpec("mlp", (12, 12), 3, (1, 1, 6))
    student = init_weights(student_spec, 1)
    teacher = init_weights(teacher_spec, 2)
    cfg = DistillConfig(proj_dim=5)
    s_head = ProjectionHead.create(8, 5, "student", [1, 2])
    t_head = ProjectionHead.create(12, 5, "teacher", [1, 1])
    tau, b = temperature_parameters(cfg)
    images = rng.uniform(0, 1, (4, 1, 1, 6))
    labels = rng.integers(0, 3, 4)
    params = student.parameters() + [s_head.weight, t_head.weight, tau, b]

    def breakdown():
        t_feats, t_logits = teacher.forward(Tensor(images))
        s_feats, s_logits = student.forward(Tensor(images))
        pair = EmbeddingPair(project(s_head, s_feats), project(t_head, t_feats))
        return total_loss(s_logits, t_logits, labels, pair, tau, b, cfg)

    return params, breakdown


def check_gradient_correctness() -> CheckResult:
    params, breakdown = _mlp_distill_setup()
    with Tape() as tape:
        tape.backward(breakdown().total)
    collect_grads(tape, params)
    worst = 0.0
    for p in params:
        if p.grad is None or p.grad.shape != p.value.shape:
            return CheckResult("gradient_correctness", False, f"bad gradient for {p.name}")
        flat = p.value.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            fp = breakdown().total.item()
            flat[i] = orig - STEP
            fm = breakdown().total.item()
            flat[i] = orig
            fd = (fp - fm) / (2 * STEP)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-4)
            worst = max(worst, rel)
            if rel >= GRAD_TOL:
                return CheckResult("gradient_correctness", False,
                                   f"{p.name}[{i}]: rel err {rel:.2e}")
    return CheckResult("gradient_correctness", True, f"worst rel err {worst:.2e}")


def check_invariants() -> CheckResult:
    rng = np.random.default_rng(99)
    for _ in range(25):
        n = int(rng.integers(1, 9))
        pair = EmbeddingPair(Tensor(_unit_rows(rng, n, 8)), Tensor(_unit_rows(rng, n, 8)))
        tau = float(rng.uniform(0, 4))
        b = float(rng.uniform(-1, 1))
        for fn in (student_distribution, teacher_distribution):
            p = fn(pair, tau, b).data
            if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12 or p.min() <= 0:
                return CheckResult("invariants", False, "distribution not row-stochastic")
        if contrastive_loss(pair, tau, b).item() < 0:
            return CheckResult("invariants", False, "negative contrastive loss")
        if consistency_loss(pair, tau, b).item() < -1e-12:
            return CheckResult("invariants", False, "negative consistency loss")
    single = EmbeddingPair(Tensor(_unit_rows(rng, 1, 8)), Tensor(_unit_rows(rng, 1, 8)))
    if contrastive_loss(single, 1.0, 0.1).item() != 0.0:
        return CheckResult("invariants", False, "N=1 contrastive loss nonzero")
    z = _unit_rows(rng, 5, 8)
    same = EmbeddingPair(Tensor(z), Tensor(z.copy()))
    if abs(consistency_loss(same, 1.3, 0.2).item()) > 1e-12:
        return CheckResult("invariants", False, "self consistency loss nonzero")
    # permutation equivariance
    pair = EmbeddingPair(Tensor(_unit_rows(rng, 6, 8)), Tensor(_unit_rows(rng, 6, 8)))
    perm = rng.permutation(6)
    permuted = EmbeddingPair(Tensor(pair.zs.data[perm]), Tensor(pair.zt.data[perm]))
    if abs(contrastive_loss(pair, 1.0, 0.1).item()
           - contrastive_loss(permuted, 1.0, 0.1).item()) > 1e-10:
        return CheckResult("invariants", False, "permutation equivariance broken")
    return CheckResult("invariants", True, "row-stochastic, non-negative, equivariant")


def check_fixture_reproduction() -> CheckResult:
    dcd_value = fixture_relative_improvement("DCD")
    dcdkd_value = fixture_relative_improvement("DCD+KD")
    ok = abs(dcd_value - 20.31) <= 0.2 and abs(dcdkd_value - 73.87) <= 0.2
    return CheckResult("fixture_relative_improvement", ok,
                       f"relative_improvement: {dcd_value:.2f} (combined {dcdkd_value:.2f})")


def check_memory_arithmetic() -> CheckResult:
    got = negative_buffer_bytes(256, 128)
    return CheckResult("memory_arithmetic", got == 131072, f"256x128x4 = {got} bytes")


def check_round_trips() -> CheckResult:
    rng = np.random.default_rng(3)
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Checkpoint({"a": rng.normal(size=(3, 4)),
                           "b": rng.integers(0, 5, 6).astype(np.int64)},
                          {"note": "round-trip"})
        path = os.path.join(tmp, "t.ckpt")
        save_checkpoint(ckpt, path)
        again = load_checkpoint(path)
        for name, arr in ckpt.tensors.items():
            if not np.array_equal(again.tensors[name], arr):
                return CheckResult("round_trips", False, f"checkpoint tensor {name}")
        images = (rng.integers(0, 256, (4, 3, 32, 32)) / 255.0).astype(np.float32)
        ds10 = Dataset(images, rng.integers(0, 10, 4), 10, "x")
        if not np.array_equal(parse_cifar10(serialize_cifar10(ds10)).images, ds10.images):
            return CheckResult("round_trips", False, "cifar10 pixels")
        ds100 = Dataset(images, rng.integers(0, 100, 4), 100, "x")
        if not np.array_equal(parse_cifar100(serialize_cifar100(ds100)).labels, ds100.labels):
            return CheckResult("round_trips", False, "cifar100 labels")
        mn_img = (rng.integers(0, 256, (3, 1, 28, 28)) / 255.0).astype(np.float32)
        mnist = Dataset(mn_img, rng.integers(0, 10, 3), 10, "x")
        back = parse_mnist_idx(*serialize_mnist_idx(mnist))
        if not np.array_equal(back.images, mnist.images):
            return CheckResult("round_trips", False, "mnist pixels")
    return CheckResult("round_trips", True, "checkpoint, cifar10, cifar100, mnist")


def check_training_invariants() -> CheckResult:
    """Short end-to-end run: determinism, tau clamp, frozen teacher."""
    train, test = synth_blob_split(3, 40, 20, 8, seed=6, std=0.05)
    t_spec = ModelSpec("mlp", (32, 32), 3, (1, 1, 8))
    s_spec = ModelSpec("mlp", (16, 16), 3, (1, 1, 8))
    t_optim = OptimSpec(lr=0.1, epochs=3, seed=4)
    t_ckpt, _ = train_teacher(t_spec, train, test, t_optim, BatchPlan(16, 4))
    frozen_before = {k: v.copy() for k, v in t_ckpt.tensors.items()}
    cfg = DistillConfig(proj_dim=6)
    s_optim = OptimSpec(lr=0.02, epochs=3, seed=5)
    ck1, logs1 = distill(t_ckpt, s_spec, train, test, cfg, s_optim, BatchPlan(16, 5))
    ck2, logs2 = distill(t_ckpt, s_spec, train, test, cfg, s_optim, BatchPlan(16, 5))
    for name in ck1.tensors:
        if not np.array_equal(ck1.tensors[name], ck2.tensors[name]):
            return CheckResult("training_invariants", False, f"nondeterministic {name}")
    if [l.row() for l in logs1] != [l.row() for l in logs2]:
        return CheckResult("training_invariants", False, "epoch logs differ across runs")
    tau = float(ck1.tensors["temperature.tau"])
    if not 0.0 <= tau <= cfg.tau_max:
        return CheckResult("training_invariants", False, f"tau {tau} escaped clamp")
    for name, arr in frozen_before.items():
        if not np.array_equal(t_ckpt.tensors[name], arr):
            return CheckResult("training_invariants", False, "teacher tensors changed")
    return CheckResult("training_invariants", True, "deterministic, clamped, frozen teacher")


def check_embedding_export() -> CheckResult:
    train, _ = synth_blob_split(2, 15, 5, 6, seed=8, std=0.05)
    spec = ModelSpec("mlp", (10,), 2, (1, 1, 6))
    model = init_weights(spec, 3)
    head = ProjectionHead.create(10, 4, "student", 9)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "emb.csv")
        count = export_embeddings(model, head, train, None, path)
        labels, vecs = read_embeddings(path)
        if count != len(train) or labels.shape[0] != count:
            return CheckResult("embedding_export", False, "row count mismatch")
        norms = np.linalg.norm(vecs, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            return CheckResult("embedding_export", False, "rows not unit norm")
    return CheckResult("embedding_export", True, f"{count} rows, unit-norm")


ALL_CHECKS = (
    check_oracle_equivalence,
    check_gradient_correctness,
    check_invariants,
    check_fixture_reproduction,
    check_memory_arithmetic,
    check_round_trips,
    check_training_invariants,
    check_embedding_export,
)


def run_all(verbose: bool = True) -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        try:
            result = fn()
        except Exception as exc:  # a crashed check is a failed check
            result = CheckResult(fn.__name__.removeprefix("check_"), False,
                                 f"{type(exc).__name__}: {exc}")
        results.append(result)
        if verbose:
            mark = "pass" if result.ok else "FAIL"
            print(f"[{mark}] {result.name}: {result.detail}")
    return results
