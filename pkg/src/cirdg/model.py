"""Encoders, attention heads, classifier and temperature for CIR."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .ndmath import (
    DimensionError,
    Tensor,
    add_bias,
    batch_norm_1d,
    exp,
    layer_norm,
    matmul,
    relu,
)

TAU_INIT = 0.07
TAU_MIN = 1e-3
TAU_MAX = 10.0


@dataclass(frozen=True)
class ModelConfig:
    video_dim: int = 6912
    text_dim: int = 512
    hidden_dim: int = 4096
    embed_dim: int = 512
    qk_dim: int = 128
    num_classes: int = 60
    seed: int = 0

    def __post_init__(self):
        for name in ("video_dim", "text_dim", "hidden_dim", "embed_dim", "qk_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CirModel:
    """All trainable state of the method.

    Parameters live in ``params`` in declaration order (the checkpoint order);
    the batch-norm running statistics live in ``buffers``.
    """

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]", buffers: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.params = params
        self.buffers = buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def tau(self) -> float:
        return math.exp(-float(self.params["log_tau_inv"].data))

    def inv_tau(self) -> Tensor:
        return exp(self.params["log_tau_inv"])

    def clamp_tau(self) -> None:
        p = self.params["log_tau_inv"]
        p.data[...] = np.clip(p.data, -math.log(TAU_MAX), -math.log(TAU_MIN))

    def clone(self) -> "CirModel":
        params = OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.params.items())
        buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return CirModel(self.config, params, buffers)


# (name, shape, init, fan-in); list order is the checkpoint order
def _layout(c: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    return [
        ("f.fc1.weight", (c.video_dim, c.hidden_dim), "kaiming_relu", c.video_dim),
        ("f.fc1.bias", (c.hidden_dim,), "zeros", 0),
        ("f.bn.scale", (c.hidden_dim,), "ones", 0),
        ("f.bn.shift", (c.hidden_dim,), "zeros", 0),
        ("f.fc2.weight", (c.hidden_dim, c.embed_dim), "kaiming_linear", c.hidden_dim),
        ("f.fc2.bias", (c.embed_dim,), "zeros", 0),
        ("g.fc1.weight", (c.text_dim, c.embed_dim), "kaiming_relu", c.text_dim),
        ("g.fc1.bias", (c.embed_dim,), "zeros", 0),
        ("g.fc2.weight", (c.embed_dim, c.embed_dim), "kaiming_linear", c.embed_dim),
        ("g.fc2.bias", (c.embed_dim,), "zeros", 0),
        ("q.weight", (c.embed_dim, c.qk_dim), "kaiming_linear", c.embed_dim),
        ("q.bias", (c.qk_dim,), "zeros", 0),
        ("q.ln.scale", (c.qk_dim,), "ones", 0),
        ("q.ln.shift", (c.qk_dim,), "zeros", 0),
        ("k.weight", (c.embed_dim, c.qk_dim), "kaiming_linear", c.embed_dim),
        ("k.bias", (c.qk_dim,), "zeros", 0),
        ("k.ln.scale", (c.qk_dim,), "ones", 0),
        ("k.ln.shift", (c.qk_dim,), "zeros", 0),
        ("h.weight", (c.embed_dim, c.num_classes), "kaiming_linear", c.embed_dim),
        ("h.bias", (c.num_classes,), "zeros", 0),
        ("log_tau_inv", (), "tau", 0),
    ]


PARAM_NAMES = [row[0] for row in _layout(ModelConfig(1, 1, 1, 1, 1, 2))]
BUFFER_NAMES = ["f.bn.running_mean", "f.bn.running_var"]


def init_parameters(config: ModelConfig, seed: int | None = None) -> CirModel:
    """Kaiming-uniform weights, zero biases, tau = 0.07; reproducible per seed."""
    rng = np.random.Generator(np.random.PCG64(config.seed if seed is None else seed))
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, kind, fan_in in _layout(config):
        if kind == "kaiming_relu":
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "kaiming_linear":
            # gain 1 for layers not followed by a ReLU
            bound = math.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.array(math.log(1.0 / TAU_INIT))
        params[name] = Tensor(data, requires_grad=True, name=name)
    buffers = OrderedDict(
        [
            ("f.bn.running_mean", np.zeros(config.hidden_dim)),
            ("f.bn.running_var", np.ones(config.hidden_dim)),
        ]
    )
    return CirModel(config, params, buffers)


def _linear(x: Tensor, model: CirModel, prefix: str) -> Tensor:
    return add_bias(matmul(x, model[prefix + ".weight"]), model[prefix + ".bias"])


def encode_video(model: CirModel, v: Tensor, mode: str = "train") -> Tensor:
    """f: FC -> batch norm -> ReLU -> FC."""
    if v.ndim != 2 or v.shape[1] != model.config.video_dim:
        raise DimensionError(f"video features {v.shape} do not match video_dim={model.config.video_dim}")
    h = _linear(v, model, "f.fc1")
    h = batch_norm_1d(
        h,
        model["f.bn.scale"],
        model["f.bn.shift"],
        model.buffers["f.bn.running_mean"],
        model.buffers["f.bn.running_var"],
        mode=mode,
    )
    return _linear(relu(h), model, "f.fc2")


def encode_text(model: CirModel, t: Tensor) -> Tensor:
    """g: FC -> ReLU -> FC."""
    if t.ndim != 2 or t.shape[1] != model.config.text_dim:
        raise DimensionError(f"text features {t.shape} do not match text_dim={model.config.text_dim}")
    return _linear(relu(_linear(t, model, "g.fc1")), model, "g.fc2")


def query(model: CirModel, e: Tensor) -> Tensor:
    return layer_norm(_linear(e, model, "q"), model["q.ln.scale"], model["q.ln.shift"])


def key(model: CirModel, e: Tensor) -> Tensor:
    return layer_norm(_linear(e, model, "k"), model["k.ln.scale"], model["k.ln.shift"])


def classify(model: CirModel, e: Tensor) -> Tensor:
    """h: one affine map, shared by video embeddings and reconstructions."""
    if e.ndim != 2 or e.shape[1] != model.config.embed_dim:
        raise DimensionError(f"embeddings {e.shape} do not match embed_dim={model.config.embed_dim}")
    return _linear(e, model, "h")
