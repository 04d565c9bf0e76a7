"""Layer classes built on the fused ops, plus the Module container protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .core import ShapeError, Tensor, concat

LAYER_KINDS = (
    "linear",
    "conv3d",
    "conv2d",
    "maxpool3d",
    "maxpool2d",
    "batchnorm2d",
    "gru_bidirectional",
    "lstm",
    "relu",
    "tanh",
    "adaptive_avgpool_time",
)


class Module:
    """Minimal container: parameters are ``Tensor`` attributes with ``requires_grad``."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for m_prefix, m in _prefixed_modules(self):
            for bname in m._buffer_names:
                arr = np.asarray(state[m_prefix + bname])
                setattr(m, bname, arr.astype(getattr(m, bname).dtype, copy=True))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _prefixed_modules(module: Module, prefix: str = "") -> Iterator[tuple[str, Module]]:
    yield prefix, module
    for name, value in module._children():
        if isinstance(value, Module):
            yield from _prefixed_modules(value, f"{prefix}{name}.")


def _param(shape, bound: float, rng: np.random.Generator, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _check_positive(kind: str, **values) -> None:
    for key, v in values.items():
        items = v if isinstance(v, (tuple, list)) else (v,)
        if any(int(i) < 1 for i in items):
            raise ValueError(f"{kind}: {key} must be >= 1, got {v}")


def _check_non_negative(kind: str, **values) -> None:
    for key, v in values.items():
        if any(int(i) < 0 for i in v):
            raise ValueError(f"{kind}: {key} must be >= 0, got {v}")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float64, bias=True):
        _check_positive("linear", in_features=in_features, out_features=out_features)
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features, self.out_features = in_features, out_features
        bound = np.sqrt(6.0 / in_features)
        self.weight = _param((out_features, in_features), bound, rng, dtype)
        self.bias = _zeros((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear({self.in_features}->{self.out_features}): last input dim is {x.shape[-1]}"
            )
        return F.linear(x, self.weight, self.bias)


class _ConvNd(Module):
    nd = 0
    kind = ""

    def __init__(self, in_channels, out_channels, kernel_size, padding=0, rng=None, dtype=np.float64):
        kernel = _tuple(kernel_size, self.nd)
        padding = _tuple(padding, self.nd)
        _check_positive(self.kind, in_channels=in_channels, out_channels=out_channels, kernel_size=kernel)
        _check_non_negative(self.kind, padding=padding)
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding = kernel, padding
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = _param((out_channels, in_channels) + kernel, np.sqrt(6.0 / fan_in), rng, dtype)
        self.bias = _zeros((out_channels,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv(x, self.weight, self.bias, self.padding, name=self.kind)

    def output_shape(self, in_shape: tuple) -> tuple:
        B, _, *sp = in_shape
        return (B, self.out_channels) + tuple(
            s + 2 * p - k + 1 for s, k, p in zip(sp, self.kernel_size, self.padding)
        )


class Conv3d(_ConvNd):
    nd = 3
    kind = "conv3d"


class Conv2d(_ConvNd):
    nd = 2
    kind = "conv2d"


class _MaxPoolNd(Module):
    nd = 0
    kind = ""

    def __init__(self, kernel_size):
        self.kernel_size = _tuple(kernel_size, self.nd)
        _check_positive(self.kind, kernel_size=self.kernel_size)

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool(x, self.kernel_size, name=self.kind)


class MaxPool3d(_MaxPoolNd):
    nd = 3
    kind = "maxpool3d"


class MaxPool2d(_MaxPoolNd):
    nd = 2
    kind = "maxpool2d"


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        _check_positive("batchnorm2d", num_features=num_features)
        self.num_features = num_features
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = _zeros((num_features,), dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class _GRUDirection(Module):
    def __init__(self, input_size, hidden_size, rng, dtype):
        bound = 1.0 / np.sqrt(hidden_size)
        self.w_ih = _param((3 * hidden_size, input_size), bound, rng, dtype)
        self.w_hh = _param((3 * hidden_size, hidden_size), bound, rng, dtype)
        self.b_ih = _zeros((3 * hidden_size,), dtype)
        self.b_hh = _zeros((3 * hidden_size,), dtype)


class BiGRU(Module):
    """Single-layer bidirectional GRU: (B, T, I) -> (B, T, 2H), forward half first."""

    def __init__(self, input_size: int, hidden_size: int, rng=None, dtype=np.float64):
        _check_positive("gru_bidirectional", input_size=input_size, hidden_size=hidden_size)
        rng = rng if rng is not None else np.random.default_rng()
        self.input_size, self.hidden_size = input_size, hidden_size
        self.fwd = _GRUDirection(input_size, hidden_size, rng, dtype)
        self.bwd = _GRUDirection(input_size, hidden_size, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise ShapeError(
                f"gru_bidirectional: expected (B, T, {self.input_size}), got {x.shape}"
            )
        a = F.gru_sequence(x, self.fwd.w_ih, self.fwd.w_hh, self.fwd.b_ih, self.fwd.b_hh)
        b = F.gru_sequence(x, self.bwd.w_ih, self.bwd.w_hh, self.bwd.b_ih, self.bwd.b_hh, reverse=True)
        return concat([a, b], axis=-1)


class LSTM(Module):
    """Single-layer LSTM from zero state.

    ``forward`` returns the hidden sequence (B, T, H); ``run`` additionally
    returns the final cell state.  ``step`` advances one time step for
    autoregressive decoding.
    """

    def __init__(self, input_size: int, hidden_size: int, rng=None, dtype=np.float64):
        _check_positive("lstm", input_size=input_size, hidden_size=hidden_size)
        rng = rng if rng is not None else np.random.default_rng()
        self.input_size, self.hidden_size = input_size, hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        self.w_ih = _param((4 * hidden_size, input_size), bound, rng, dtype)
        self.w_hh = _param((4 * hidden_size, hidden_size), bound, rng, dtype)
        self.b_ih = _zeros((4 * hidden_size,), dtype)
        self.b_hh = _zeros((4 * hidden_size,), dtype)

    def run(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise ShapeError(f"lstm: expected (B, T, {self.input_size}), got {x.shape}")
        H = self.hidden_size
        both = F.lstm_sequence(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        return both[:, :, :H], both[:, -1, H:]

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden_size
        both = F.lstm_cell(x, h, c, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        return both[:, :H], both[:, H:]


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class Tanh(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.tanh()


class AdaptiveAvgPoolTime(Module):
    """Pools the last axis to ``output_size`` steps."""

    def __init__(self, output_size: int = 135):
        _check_positive("adaptive_avgpool_time", output_size=output_size)
        self.output_size = output_size

    def forward(self, x: Tensor) -> Tensor:
        return F.adaptive_avg_pool_time(x, self.output_size)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def mlp(sizes: list[int], rng, dtype=np.float64, final_activation: bool = False) -> Sequential:
    """Linear layers with ReLU between them (and optionally after the last)."""
    layers: list[Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng=rng, dtype=dtype))
        if i < len(sizes) - 2 or final_activation:
            layers.append(ReLU())
    return Sequential(*layers)


def _tuple(v, n: int) -> tuple:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


_BUILDERS = {
    "linear": Linear,
    "conv3d": Conv3d,
    "conv2d": Conv2d,
    "maxpool3d": MaxPool3d,
    "maxpool2d": MaxPool2d,
    "batchnorm2d": BatchNorm2d,
    "gru_bidirectional": BiGRU,
    "lstm": LSTM,
    "relu": ReLU,
    "tanh": Tanh,
    "adaptive_avgpool_time": AdaptiveAvgPoolTime,
}


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; ``build`` validates and instantiates it."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _BUILDERS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")

    def build(self, rng=None, dtype=np.float64) -> Module:
        cls = _BUILDERS[self.kind]
        kwargs = dict(self.hyperparameters)
        if self.kind in ("linear", "conv3d", "conv2d", "gru_bidirectional", "lstm"):
            kwargs.setdefault("rng", rng)
        if self.kind in ("linear", "conv3d", "conv2d", "gru_bidirectional", "lstm", "batchnorm2d"):
            kwargs.setdefault("dtype", dtype)
        return cls(**kwargs)


def forward(layer: LayerSpec | Module, *inputs: Tensor, rng=None) -> Tensor:
    """Apply a layer (built on the fly from a spec if needed) to its inputs."""
    module = layer.build(rng=rng) if isinstance(layer, LayerSpec) else layer
    return module(*inputs)
