"""Compact teacher/student networks and the shared projection heads.

Two families: plain ReLU MLPs and small ConvNets (3x3 conv -> ReLU ->
2x2 max-pool per block, global average pooling, linear classifier).
No batch normalization anywhere, so forward passes are pure functions
of the weights and finite-difference checks stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class ModelSpec:
    family: str                # "mlp" | "convnet"
    widths: tuple[int, ...]    # hidden widths (mlp) or block channels (convnet)
    num_classes: int
    in_shape: tuple[int, ...]  # (C, H, W)

    def __post_init__(self):
        if self.family not in ("mlp", "convnet"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be non-empty and positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.in_shape) != 3 or any(s < 1 for s in self.in_shape):
            raise ConfigError("in_shape must be (channels, height, width)")
        if self.family == "convnet" and min(self.in_shape[1:]) < 2 ** len(self.widths):
            raise ConfigError("input too small for the requested number of pooling stages")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def in_dim(self) -> int:
        c, h, w = self.in_shape
        return c * h * w

    def to_dict(self) -> dict:
        return {"family": self.family, "widths": list(self.widths),
                "num_classes": self.num_classes, "in_shape": list(self.in_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], tuple(d["widths"]), int(d["num_classes"]),
                   tuple(d["in_shape"]))


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers: list[tuple[Parameter, Parameter]] = []
        d = spec.in_dim
        for i, width in enumerate(spec.widths):
            w = Parameter(_kaiming_uniform(rng, (d, width), d), name=f"model.layer{i}.weight")
            b = Parameter(np.zeros(width), name=f"model.layer{i}.bias")
            self.layers.append((w, b))
            d = width
        self.cls_w = Parameter(_kaiming_uniform(rng, (d, spec.num_classes), d),
                               name="model.classifier.weight")
        self.cls_b = Parameter(np.zeros(spec.num_classes), name="model.classifier.bias")

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        out.extend((self.cls_w, self.cls_b))
        return out

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        n = images.shape[0]
        if int(np.prod(images.shape[1:])) != self.spec.in_dim:
            raise ShapeMismatchError(
                f"expects inputs of {self.spec.in_shape}, got {images.shape[1:]}")
        h = ad.reshape(images, (n, self.spec.in_dim))
        for w, b in self.layers:
            h = ad.relu(ad.add_rowvec(ad.matmul(h, w.value), b.value))
        logits = ad.add_rowvec(ad.matmul(h, self.cls_w.value), self.cls_b.value)
        return h, logits


class ConvNet:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.kernels: list[Parameter] = []
        c = spec.in_shape[0]
        for i, f in enumerate(spec.widths):
            k = Parameter(_kaiming_uniform(rng, (f, c, 3, 3), c * 9),
                          name=f"model.block{i}.kernel")
            self.kernels.append(k)
            c = f
        self.cls_w = Parameter(_kaiming_uniform(rng, (c, spec.num_classes), c),
                               name="model.classifier.weight")
        self.cls_b = Parameter(np.zeros(spec.num_classes), name="model.classifier.bias")

    def parameters(self) -> list[Parameter]:
        return [*self.kernels, self.cls_w, self.cls_b]

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        if images.shape[1:] != self.spec.in_shape:
            raise ShapeMismatchError(
                f"expects inputs of {self.spec.in_shape}, got {images.shape[1:]}")
        h = images
        for k in self.kernels:
            h = ad.maxpool2d(ad.relu(ad.conv2d(h, k.value, stride=1, pad=1)), 2)
        n, c, hh, ww = h.shape
        features = ad.reshape(ad.avgpool2d(h, (hh, ww)), (n, c))
        logits = ad.add_rowvec(ad.matmul(features, self.cls_w.value), self.cls_b.value)
        return features, logits


Model = Mlp | ConvNet


def init_weights(spec: ModelSpec, seed: int) -> Model:
    """Build a model with Kaiming-uniform fan-in weights, reproducible per seed.

    Draw order is fixed (layer by layer, weights only; biases are
    zero-initialized), so equal seeds give bitwise-equal weights.
    """
    rng = np.random.default_rng(seed)
    if spec.family == "mlp":
        return Mlp(spec, rng)
    return ConvNet(spec, rng)


def count_parameters(model: Model) -> int:
    return sum(p.value.size for p in model.parameters())


@dataclass
class ProjectionHead:
    """Bias-free linear map onto the shared unit hypersphere."""

    weight: Parameter
    owner: str  # "student" | "teacher"

    @classmethod
    def create(cls, feature_dim: int, proj_dim: int, owner: str, seed) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        w = Parameter(_kaiming_uniform(rng, (feature_dim, proj_dim), feature_dim),
                      name=f"head.{owner}.weight")
        return cls(w, owner)


def project(head: ProjectionHead, features: Tensor) -> Tensor:
    """Row-normalized linear projection of penultimate features."""
    if features.data.ndim != 2 or features.shape[1] != head.weight.value.shape[0]:
        raise ShapeMismatchError(
            f"features {features.shape} do not match head {head.weight.value.shape}")
    return ad.l2_normalize_rows(ad.matmul(features, head.weight.value))


# Shipped capacity recipes: the student halves (convnet) or quarters (mlp)
# every width of its teacher.
def convnet_pair(in_shape: tuple[int, int, int], num_classes: int) -> tuple[ModelSpec, ModelSpec]:
    teacher = ModelSpec("convnet", (32, 64, 128), num_classes, in_shape)
    student = ModelSpec("convnet", (16, 32, 64), num_classes, in_shape)
    return teacher, student


def mlp_pair(in_shape: tuple[int, int, int], num_classes: int) -> tuple[ModelSpec, ModelSpec]:
    teacher = ModelSpec("mlp", (512, 512), num_classes, in_shape)
    student = ModelSpec("mlp", (128, 128), num_classes, in_shape)
    return teacher, student
