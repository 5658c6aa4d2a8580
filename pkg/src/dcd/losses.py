"""Loss terms for discriminative-and-consistent distillation.

The logit map is ``cos(z_i, z_j) * exp(tau) + b`` over row-normalized
projections, with a learnable temperature ``tau`` (clamped to
``[0, tau_max]`` by the optimizer) and a learnable bias ``b``.  The
contrastive term is cross-entropy of the student-anchored similarity
rows against the diagonal; the consistency term is the mean KL
divergence between student-anchored and teacher-anchored similarity
distributions.  All functions return tape-tracked scalar tensors, so a
single backward pass reaches the student network, both projection heads
and the two scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, IndexOutOfRangeError, ShapeMismatchError

# Multiplicative parameterization exp(tau) matching a fixed divisor
# temperature of 0.07, the conventional contrastive default.
TAU_INIT_DEFAULT = math.log(1.0 / 0.07)


@dataclass(frozen=True)
class DistillConfig:
    """Scalar hyperparameters of the combined objective and its schedule."""

    alpha: float = 0.5
    beta: float = 1.0
    lambda_kl: float = 1.0
    tau_init: float = TAU_INIT_DEFAULT
    b_init: float = 0.0
    tau_max: float = 10.0
    kd_temperature: float = 4.0
    proj_dim: int = 128
    learn_temperature: bool = True
    detach_consistency_target: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lambda_kl < 0:
            raise ConfigError("alpha, beta and lambda_kl must be non-negative")
        if self.tau_max <= 0:
            raise ConfigError("tau_max must be positive")
        if self.kd_temperature <= 0:
            raise ConfigError("kd_temperature must be positive")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be at least 1")
        if not 0.0 <= self.tau_init <= self.tau_max:
            raise ConfigError(f"tau_init must lie in [0, {self.tau_max}]")


def temperature_parameters(cfg: DistillConfig) -> tuple[Parameter, Parameter]:
    """Fresh (tau, b) scalars; tau carries the clamp interval, neither decays."""
    tau = Parameter(np.float64(cfg.tau_init), name="temperature.tau",
                    bounds=(0.0, cfg.tau_max), decay=False)
    b = Parameter(np.float64(cfg.b_init), name="temperature.b", decay=False)
    return tau, b


class EmbeddingPair:
    """Student/teacher projection batches of identical [N, D] shape.

    Rows are expected to lie on the unit hypersphere; construction via
    :meth:`from_projections` enforces that to 1e-9.  The plain
    constructor checks shapes only, which keeps the loss functions
    usable as plain differentiable functions of raw leaves (they
    re-normalize internally either way).
    """

    def __init__(self, zs: Tensor, zt: Tensor):
        if zs.data.ndim != 2 or zt.data.ndim != 2:
            raise ShapeMismatchError("embedding batches must be matrices")
        if zs.shape != zt.shape:
            raise ShapeMismatchError(f"student/teacher shapes differ: {zs.shape} vs {zt.shape}")
        if zs.shape[0] < 1:
            raise ShapeMismatchError("embedding batch must contain at least one row")
        self.zs = zs
        self.zt = zt

    @property
    def n(self) -> int:
        return self.zs.shape[0]

    def unit_norm_error(self) -> float:
        errs = []
        for z in (self.zs, self.zt):
            norms = np.sqrt((z.data * z.data).sum(axis=1))
            errs.append(float(np.abs(norms - 1.0).max()))
        return max(errs)

    @classmethod
    def from_projections(cls, zs: Tensor, zt: Tensor, tol: float = 1e-9) -> "EmbeddingPair":
        pair = cls(zs, zt)
        err = pair.unit_norm_error()
        if err > tol:
            raise ShapeMismatchError(f"projection rows are not unit-norm (max error {err:.3e})")
        return pair


def _scalar(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(np.float64(x))


def _check_tau(tau) -> Tensor:
    if isinstance(tau, Parameter) and tau.bounds is not None:
        lo, hi = tau.bounds
        val = float(tau.value.data)
        if not lo <= val <= hi:
            raise ConfigError(f"temperature {val} outside clamp interval [{lo}, {hi}]")
    return _scalar(tau)


def similarity_logits(pair: EmbeddingPair, tau, b, anchor: str = "student") -> Tensor:
    """[N, N] logit matrix cos(anchor_i, other_j) * exp(tau) + b."""
    if anchor not in ("student", "teacher"):
        raise ConfigError(f"anchor must be 'student' or 'teacher', got {anchor!r}")
    tau_t = _check_tau(tau)
    b_t = _scalar(b)
    zs_n = ad.l2_normalize_rows(pair.zs)
    zt_n = ad.l2_normalize_rows(pair.zt)
    if anchor == "student":
        cos = ad.matmul(zs_n, ad.transpose(zt_n))
    else:
        cos = ad.matmul(zt_n, ad.transpose(zs_n))
    return ad.add(ad.mul(cos, ad.exp(tau_t)), b_t)


def contrastive_loss(pair: EmbeddingPair, tau, b) -> Tensor:
    """Each student row must select its own teacher row among the batch."""
    lsm = ad.log_softmax_rows(similarity_logits(pair, tau, b, anchor="student"))
    neg_diag = Tensor(-np.eye(pair.n))
    return ad.scale(ad.tsum(ad.mul(lsm, neg_diag)), 1.0 / pair.n)


def student_distribution(pair: EmbeddingPair, tau, b) -> Tensor:
    """Row-stochastic matrix: softmax over student-anchored similarity rows."""
    return ad.exp(ad.log_softmax_rows(similarity_logits(pair, tau, b, anchor="student")))


def teacher_distribution(pair: EmbeddingPair, tau, b) -> Tensor:
    """Row-stochastic matrix: softmax over teacher-anchored similarity rows."""
    return ad.exp(ad.log_softmax_rows(similarity_logits(pair, tau, b, anchor="teacher")))


def consistency_loss(pair: EmbeddingPair, tau, b, detach_target: bool = False) -> Tensor:
    """Mean KL between student-anchored and teacher-anchored distributions.

    With ``detach_target`` the teacher-anchored distribution is treated
    as a constant target; by default gradients flow through both sides.
    """
    ls = ad.log_softmax_rows(similarity_logits(pair, tau, b, anchor="student"))
    lt = ad.log_softmax_rows(similarity_logits(pair, tau, b, anchor="teacher"))
    if detach_target:
        lt = lt.detach()
    p = ad.exp(ls)
    return ad.scale(ad.tsum(ad.mul(p, ad.sub(ls, lt))), 1.0 / pair.n)


def dcd_loss(pair: EmbeddingPair, tau, b, cfg: DistillConfig) -> Tensor:
    """Contrastive term plus alpha-weighted consistency term."""
    contrast = contrastive_loss(pair, tau, b)
    if cfg.alpha == 0.0:
        return contrast
    consist = consistency_loss(pair, tau, b, cfg.detach_consistency_target)
    return ad.add(contrast, ad.scale(consist, cfg.alpha))


def _np_log_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kd_kl_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """T^2-scaled mean KL(teacher_T || student_T); the teacher side is constant."""
    t = float(temperature)
    if t <= 0:
        raise ConfigError("kd temperature must be positive")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(
        teacher_logits, dtype=np.float64)
    if student_logits.data.ndim != 2 or t_data.shape != student_logits.shape:
        raise ShapeMismatchError(
            f"logit shapes differ: {student_logits.shape} vs {t_data.shape}")
    n = student_logits.shape[0]
    t_log_p = _np_log_softmax(t_data / t)
    t_p = np.exp(t_log_p)
    s_lsm = ad.log_softmax_rows(ad.scale(student_logits, 1.0 / t))
    per = ad.mul(Tensor(t_p), ad.sub(Tensor(t_log_p), s_lsm))
    return ad.scale(ad.tsum(per), t * t / n)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true label of each row."""
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexOutOfRangeError(f"label outside [0, {c})")
    picked = np.zeros((n, c))
    picked[np.arange(n), labels] = -1.0
    lsm = ad.log_softmax_rows(logits)
    return ad.scale(ad.tsum(ad.mul(lsm, Tensor(picked))), 1.0 / n)


@dataclass
class LossBreakdown:
    """Per-term scalar tensors of the combined objective."""

    sup: Tensor
    distill_kl: Tensor
    contrast: Tensor
    consist: Tensor
    kd: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "sup": self.sup.item(),
            "distill_kl": self.distill_kl.item(),
            "contrast": self.contrast.item(),
            "consist": self.consist.item(),
            "kd": self.kd.item(),
            "total": self.total.item(),
        }


def total_loss(student_logits: Tensor, teacher_logits, labels, pair: EmbeddingPair,
               tau, b, cfg: DistillConfig) -> LossBreakdown:
    """Supervised CE + lambda * plain KD KL + beta * (contrast + alpha * consist).

    Zero-weighted terms are still evaluated for logging but excluded
    from the total's graph, so e.g. beta=0, lambda=0 optimizes exactly
    the supervised loss.
    """
    sup = cross_entropy_loss(student_logits, labels)
    distill_kl = kd_kl_loss(student_logits, teacher_logits, cfg.kd_temperature)
    contrast = contrastive_loss(pair, tau, b)
    consist = consistency_loss(pair, tau, b, cfg.detach_consistency_target)
    if cfg.alpha == 0.0:
        kd = contrast
    else:
        kd = ad.add(contrast, ad.scale(consist, cfg.alpha))
    total = sup
    if cfg.lambda_kl != 0.0:
        total = ad.add(total, ad.scale(distill_kl, cfg.lambda_kl))
    if cfg.beta != 0.0:
        total = ad.add(total, ad.scale(kd, cfg.beta))
    return LossBreakdown(sup, distill_kl, contrast, consist, kd, total)
