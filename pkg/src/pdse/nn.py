"""Parameter containers and the layers the detector is assembled from.

Modules register parameters, buffers, and child modules in insertion order,
so ``named_parameters()`` yields a deterministic dotted-path table (e.g.
``dse.p3.deform.offset_conv.weight``). Weight initialization draws from an
explicit :class:`numpy.random.Generator`, keeping model construction
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor


def rng_for(seed: int, group: str) -> np.random.Generator:
    """Independent generator for a named parameter group.

    Group streams are decoupled so that toggling one component on or off
    cannot shift the draws of another (required for ablation isolation).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(group.encode())])))


class Parameter(Tensor):
    """A trainable tensor reachable from a model root under a unique name.

    Stored at the training precision by default; ``Module.to_dtype`` widens
    a whole tree to float64 for gradient checking.
    """

    def __init__(self, data, dtype=DEFAULT_DTYPE):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class with ordered registration of params, buffers, and children."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Track non-trainable state (e.g. batch-norm running statistics)."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._parameters.items():
            yield (prefix + name, p)
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        """Name -> array for all parameters and buffers, in registration order."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, arr in state.items():
            target = own[name]
            if tuple(target.shape) != tuple(np.shape(arr)):
                raise ShapeError(f"state entry {name}: shape {np.shape(arr)} != {target.shape}")
            target[...] = arr

    def to_dtype(self, dtype):
        """Convert all parameters and float buffers in place (for 64-bit checks)."""
        for m in self.modules():
            for name, p in list(m._parameters.items()):
                p.data = p.data.astype(dtype)
            for name, b in list(m._buffers.items()):
                if b.dtype.kind == "f":
                    m._buffers[name] = b.astype(dtype)
                    object.__setattr__(m, name, m._buffers[name])
        return self


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for item in items:
            self.append(item)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


class ModuleDict(Module):
    def __init__(self, items: dict | None = None):
        super().__init__()
        for key, module in (items or {}).items():
            self[key] = module

    def __setitem__(self, key: str, module: Module):
        self._modules[key] = module

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __contains__(self, key: str) -> bool:
        return key in self._modules

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


class Conv2d(Module):
    """2D convolution layer; ``init`` selects the weight scheme.

    init:
        "he"            He-normal fan-in scaling (ReLU-followed convs).
        "xavier"        unit-gain fan-in scaling (linear convs; keeps the
                        pyramid's variance from compounding).
        "zeros"         exact zeros (offset predictors, augmentation paths).
        ("normal", s)   N(0, s) (detection-head output convention).
    bias_init: constant fill for the bias (ignored when bias=False).
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 bias=True, init="he", bias_init=0.0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        if init == "he":
            w = he_normal(rng, shape, fan_in)
        elif init == "xavier":
            w = xavier_normal(rng, shape, fan_in)
        elif init == "zeros":
            w = np.zeros(shape)
        elif isinstance(init, tuple) and init[0] == "normal":
            w = rng.normal(0.0, init[1], size=shape)
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.full(out_channels, bias_init)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, init="he"):
        super().__init__()
        if init == "he":
            w = he_normal(rng, (out_features, in_features), in_features)
        elif init == "zeros":
            w = np.zeros((out_features, in_features))
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.transpose(1, 0)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1)
        return out


class BatchNorm2d(Module):
    """Batch normalization with running statistics (momentum 0.9, eps 1e-5)."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


def cast_input(x, dtype=DEFAULT_DTYPE) -> Tensor:
    """Wrap an array as a non-trainable input tensor of the model dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)
