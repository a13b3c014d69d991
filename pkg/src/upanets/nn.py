"""Parameter containers: a small Module base plus the primitive layers.

Modules own named parameters (Tensors with requires_grad), named buffers
(plain arrays such as batch-norm running statistics) and child modules.
Names compose with dots, e.g. "layer2.block0.cpa.weight".
"""

from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Parameter(NamedTuple):
    """A named, trainable tensor as exposed by Module.named_parameters()."""

    name: str
    tensor: Tensor


class Module:
    """Base container; subclasses assign Tensors/Modules as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name, module):
        """Register a child under an explicit name (for list-held blocks)."""
        self._children[name] = module
        return module

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix="") -> Iterator[Parameter]:
        for name, p in self._params.items():
            yield Parameter(prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p.tensor for p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        return int(sum(p.size for p in self.parameters()))

    def cast(self, dtype):
        """Convert all parameters and buffers to `dtype` in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self._walk():
            for name, b in list(mod._buffers.items()):
                if b.dtype != dtype:
                    mod.register_buffer(name, b.astype(dtype))
            if hasattr(mod, "_sync_stats"):
                mod._sync_stats()
        return self

    def _walk(self):
        yield self
        for child in self._children.values():
            yield from child._walk()

    def state_entries(self):
        """Ordered (name, array) pairs covering parameters and buffers."""
        entries = [(name, p.data) for name, p in self.named_parameters()]
        entries += list(self.named_buffers())
        return entries

    def load_state(self, arrays):
        """Copy values from a {name: array} mapping; strict on names/shapes."""
        wanted = dict(self.state_entries())
        missing = set(wanted) - set(arrays)
        extra = set(arrays) - set(wanted)
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.named_parameters():
            src = arrays[name]
            if tuple(src.shape) != p.shape:
                raise DimensionError(f"shape mismatch for {name}: {src.shape} vs {p.shape}")
            p.data = src.astype(p.data.dtype).reshape(p.shape)
            p.grad = None
        for name, b in self.named_buffers():
            src = arrays[name]
            if src.size != b.size:
                raise DimensionError(f"shape mismatch for {name}: {src.shape} vs {b.shape}")
            b[...] = src.reshape(b.shape)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """3x3-style convolution layer; bias-free (batch norm always follows)."""

    def __init__(self, cin, cout, k, rng, stride=1, pad=0, groups=1, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if groups < 1 or cin % groups or cout % groups:
            raise ConfigError(f"Conv2d groups={groups} must divide cin={cin} and cout={cout}")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad, self.groups = stride, pad, groups
        fan_in = (cin // groups) * k * k
        self.weight = Tensor(_he_normal(rng, (cout, cin // groups, k, k), fan_in, dtype),
                             requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, None, stride=self.stride, pad=self.pad, groups=self.groups)

    __call__ = forward


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=T.DEFAULT_DTYPE, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = T.RunningStats(channels, dtype=dtype)
        self.register_buffer("running_mean", self.stats.mean)
        self.register_buffer("running_var", self.stats.var)
        self.register_buffer("batches_tracked", self.stats.batches)

    def _sync_stats(self):
        self.stats.mean = self.running_mean
        self.stats.var = self.running_var
        self.stats.batches = self.batches_tracked

    def forward(self, x, mode):
        return T.batchnorm2d(x, self.gamma, self.beta, self.stats, mode,
                             eps=self.eps, momentum=self.momentum)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, normalized_shape, dtype=T.DEFAULT_DTYPE, eps=1e-5):
        super().__init__()
        self.normalized_shape = tuple(normalized_shape)
        self.eps = eps
        self.gamma = Tensor(np.ones(self.normalized_shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(self.normalized_shape, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.normalized_shape, eps=self.eps)

    __call__ = forward


class Linear(Module):
    """Affine map x[N, in] -> x @ W + b with fan-in-scaled uniform init."""

    def __init__(self, cin, cout, rng, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = Tensor(_fan_in_uniform(rng, (cin, cout), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    __call__ = forward
