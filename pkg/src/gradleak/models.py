"""Classifiers assembled as feature-extractor + single linear head.

Every architecture ends with a ReLU, so penultimate features are always
non-negative, followed by exactly one linear head mapping the D-dimensional
feature to K class logits. The head carries no bias by default; a flag
enables one for robustness experiments.

Architectures (desk scale):
  mlp-small : flatten -> 256 ReLU -> D=128 ReLU -> head
  conv-small: 2 x (conv3x3 ReLU avgpool2) -> linear to D=256 ReLU -> head
  conv-med  : 4 conv3x3 blocks (pool after the first two) -> D=512 ReLU -> head
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .container import MAGIC_CHECKPOINT, read_container, write_container
from .tensor import Tensor

ARCH_DEFAULTS = {
    "mlp-small": {"feature_dim": 128, "hidden": [256]},
    "conv-small": {"feature_dim": 256, "channels": [8, 16]},
    "conv-med": {"feature_dim": 512, "channels": [16, 32, 64, 64]},
}

_POOL_AFTER = {"conv-small": (0, 1), "conv-med": (0, 1)}


@dataclass
class ModelSpec:
    """Architecture id plus the shape hyperparameters that pin every tensor."""

    arch: str
    input_shape: tuple[int, int, int] = (1, 28, 28)
    feature_dim: int = 0  # 0 -> architecture default
    num_classes: int = 10
    hidden: list[int] = field(default_factory=list)
    channels: list[int] = field(default_factory=list)
    kernel_size: int = 3
    head_bias: bool = False

    def __post_init__(self):
        if self.arch not in ARCH_DEFAULTS:
            raise ValueError(f"unknown architecture id '{self.arch}'")
        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        defaults = ARCH_DEFAULTS[self.arch]
        if self.feature_dim <= 0:
            self.feature_dim = defaults["feature_dim"]
        if self.arch == "mlp-small" and not self.hidden:
            self.hidden = list(defaults["hidden"])
        if self.arch.startswith("conv") and not self.channels:
            self.channels = list(defaults["channels"])
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "head_bias": self.head_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(arch=d["arch"], input_shape=tuple(d["input_shape"]), feature_dim=d["feature_dim"],
                   num_classes=d["num_classes"], hidden=list(d.get("hidden", [])),
                   channels=list(d.get("channels", [])), kernel_size=d.get("kernel_size", 3),
                   head_bias=d.get("head_bias", False))


@dataclass
class ForwardTrace:
    """One batch pass: penultimate features, logits, probabilities, mean loss."""

    features: Tensor
    logits: Tensor
    probs: np.ndarray
    loss: Tensor


class Model:
    """A ModelSpec plus its named parameter tensors.

    forward(x) is exactly head(features(x)); the head weight (D, K) is the
    only parameter consumed after the feature extractor.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @property
    def head_weight(self) -> Tensor:
        return self.params["head.w"]

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        """Copy with parameters cast (float64 copies are used for verification)."""
        return Model(self.spec, {k: Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype)
                                 for k, p in self.params.items()})

    def _check_batch(self, x: Tensor):
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(f"model expects batches of shape (N, {self.spec.input_shape}), "
                               f"got {tuple(x.shape)}")

    def features(self, x: Tensor) -> Tensor:
        """Penultimate representation, shape (N, D); non-negative by the final ReLU."""
        self._check_batch(x)
        spec = self.spec
        h = x
        if spec.arch == "mlp-small":
            h = T.flatten(h)
            for i in range(len(spec.hidden)):
                h = T.relu(T.add(T.matmul(h, self.params[f"fc{i + 1}.w"]), self.params[f"fc{i + 1}.b"]))
        else:
            pool_after = _POOL_AFTER[spec.arch]
            pad = spec.kernel_size // 2
            for i in range(len(spec.channels)):
                h = T.relu(T.conv2d(h, self.params[f"conv{i + 1}.w"], self.params[f"conv{i + 1}.b"],
                                    stride=1, padding=pad))
                if i in pool_after:
                    h = T.avgpool2d(h, 2)
            h = T.flatten(h)
        return T.relu(T.add(T.matmul(h, self.params["proj.w"]), self.params["proj.b"]))

    def head_logits(self, r: Tensor) -> Tensor:
        logits = T.matmul(r, self.params["head.w"])
        if self.spec.head_bias:
            logits = T.add(logits, self.params["head.b"])
        return logits

    def forward(self, x: Tensor) -> Tensor:
        return self.head_logits(self.features(x))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a plain array of images, computed without tracking."""
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append(self.forward(Tensor(images[i : i + batch_size], dtype=self.dtype)).data)
        return np.concatenate(outs, axis=0)


def _flat_width(spec: ModelSpec) -> int:
    c, h, w = spec.input_shape
    if spec.arch == "mlp-small":
        return c * h * w
    for i in range(len(spec.channels)):
        if i in _POOL_AFTER[spec.arch]:
            h, w = h // 2, w // 2
    return spec.channels[-1] * h * w


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize a model deterministically from the seed (Kaiming-uniform fan-in)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}

    def param(name, shape, fan_in):
        params[name] = Tensor(_kaiming_uniform(rng, shape, fan_in), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    if spec.arch == "mlp-small":
        width = int(np.prod(spec.input_shape))
        for i, h in enumerate(spec.hidden):
            param(f"fc{i + 1}.w", (width, h), width)
            zeros(f"fc{i + 1}.b", (h,))
            width = h
    else:
        k = spec.kernel_size
        c_in = spec.input_shape[0]
        for i, c_out in enumerate(spec.channels):
            param(f"conv{i + 1}.w", (c_out, c_in, k, k), c_in * k * k)
            zeros(f"conv{i + 1}.b", (c_out,))
            c_in = c_out
        width = _flat_width(spec)
    param("proj.w", (width, spec.feature_dim), width)
    zeros("proj.b", (spec.feature_dim,))
    param("head.w", (spec.feature_dim, spec.num_classes), spec.feature_dim)
    if spec.head_bias:
        zeros("head.b", (spec.num_classes,))
    return Model(spec, params)


def forward_trace(model: Model, batch, labels) -> ForwardTrace:
    """Full batch pass: features, logits, probabilities, and mean cross-entropy."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise T.ShapeError(f"forward_trace: got {labels.size} labels for a batch of {x.shape[0]}")
    r = model.features(x)
    logits = model.head_logits(r)
    loss, probs = T.softmax_cross_entropy(logits, labels)
    return ForwardTrace(features=r, logits=logits, probs=probs, loss=loss)


def save_checkpoint(model: Model, path):
    """Write the model to the GLCK container; round-trips are bit-exact."""
    write_container(path, MAGIC_CHECKPOINT, {"spec": model.spec.to_dict()},
                    {k: p.data for k, p in model.params.items()})


def load_checkpoint(path) -> Model:
    header, arrays = read_container(path, MAGIC_CHECKPOINT)
    spec = ModelSpec.from_dict(header["spec"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return Model(spec, params)
