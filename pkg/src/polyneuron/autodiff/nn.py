"""Layer containers with parameter discovery, train/eval modes and init."""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from polyneuron.autodiff import functional as F
from polyneuron.autodiff.tensor import Tensor

# per-thread, so models trained on different threads do not interfere
_state = threading.local()


def _diag():
    if not hasattr(_state, "d"):
        _state.d = {"on": False, "offender": None}
    return _state.d


class Parameter(Tensor):
    def __init__(self, data, decay_exempt=False, name=None):
        super().__init__(data, requires_grad=True, decay_exempt=decay_exempt, name=name)


@contextlib.contextmanager
def find_non_finite():
    """Record the first module whose output is non-finite.

    Yields a dict; after the block, ``result["layer"]`` is the dotted module
    name or ``None``.
    """
    _diagnose = _diag()
    _diagnose["on"] = True
    _diagnose["offender"] = None
    result = {"layer": None}
    try:
        yield result
    finally:
        result["layer"] = _diagnose["offender"]
        _diagnose["on"] = False
        _diagnose["offender"] = None


class Module:
    training = True
    _path = ""

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        _diagnose = _diag()
        if _diagnose["on"] and _diagnose["offender"] is None and isinstance(out, Tensor):
            if not np.all(np.isfinite(out.data)):
                _diagnose["offender"] = self._path or type(self).__name__
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self):
        for _, m in self.named_modules():
            yield m

    def named_parameters(self):
        for path, module in self.named_modules():
            for name, value in vars(module).items():
                if isinstance(value, Parameter):
                    yield (f"{path}.{name}" if path else name), value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for path, module in self.named_modules():
            for name in getattr(module, "_buffer_names", ()):
                yield (f"{path}.{name}" if path else name), module, name

    def assign_paths(self):
        for path, module in self.named_modules():
            module._path = path
        return self

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def children(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 bias=True, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if not self.training:
            out, _, _ = F.batch_norm2d(
                x, self.weight, self.bias, self.running_mean, self.running_var, self.eps
            )
            return out
        out, mean, var = F.batch_norm2d(x, self.weight, self.bias, eps=self.eps)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / max(m - 1, 1))
        self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(
            self.running_mean.dtype
        )
        self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(
            self.running_var.dtype
        )
        return out


class MaxPool2d(Module):
    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        return F.max_pool2d(x, self.size)


class GlobalAvgPool(Module):
    def forward(self, x):
        return F.global_avg_pool(x)


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)
