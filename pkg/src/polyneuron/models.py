"""LeNet-5 and ResNet-20 parameterised by activation kind."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from polyneuron.activations import ActivationSpec, activations_of, make_activation
from polyneuron.autodiff.nn import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Module,
    Sequential,
)
from polyneuron.exceptions import ConfigError

ARCHITECTURES = {"lenet5": (1, 28, 28), "resnet20": (3, 32, 32)}


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "lenet5"
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    input_shape: tuple[int, int, int] | None = None
    n_classes: int = 10

    def __post_init__(self):
        arch = self.architecture.lower().replace("-", "")
        object.__setattr__(self, "architecture", arch)
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected lenet5 or resnet20")
        if self.input_shape is None:
            object.__setattr__(self, "input_shape", ARCHITECTURES[arch])
        elif tuple(self.input_shape) != ARCHITECTURES[arch]:
            raise ConfigError(
                f"{arch} expects input shape {ARCHITECTURES[arch]}, got {tuple(self.input_shape)}"
            )
        if self.n_classes != 10:
            raise ConfigError(f"benchmarks have 10 classes, got {self.n_classes}")


class LeNet5(Module):
    """conv(6@5x5, pad 2)-pool-conv(16@5x5)-pool-fc120-fc84-fc10."""

    def __init__(self, act: ActivationSpec, rng, dtype=np.float32, width=1.0):
        c1, c2 = max(1, round(6 * width)), max(1, round(16 * width))
        f1, f2 = max(1, round(120 * width)), max(1, round(84 * width))
        self.features = Sequential(
            Conv2d(1, c1, 5, rng, padding=2, dtype=dtype),
            make_activation(act, c1, rng, dtype),
            MaxPool2d(2),
            Conv2d(c1, c2, 5, rng, dtype=dtype),
            make_activation(act, c2, rng, dtype),
            MaxPool2d(2),
            Flatten(),
        )
        self.classifier = Sequential(
            Linear(c2 * 25, f1, rng, dtype),
            make_activation(act, f1, rng, dtype),
            Linear(f1, f2, rng, dtype),
            make_activation(act, f2, rng, dtype),
            Linear(f2, 10, rng, dtype),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, act, rng, dtype):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.act1 = make_activation(act, cout, rng, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(
                Conv2d(cin, cout, 1, rng, stride=stride, bias=False, dtype=dtype),
                BatchNorm2d(cout, dtype=dtype),
            )
        else:
            self.shortcut = None
        self.act2 = make_activation(act, cout, rng, dtype)

    def forward(self, x):
        out = self.bn2(self.conv2(self.act1(self.bn1(self.conv1(x)))))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act2(out + skip)


class ResNet20(Module):
    def __init__(self, act: ActivationSpec, rng, dtype=np.float32, blocks_per_stage=3, width=16):
        widths = (width, 2 * width, 4 * width)
        self.stem = Conv2d(3, widths[0], 3, rng, padding=1, bias=False, dtype=dtype)
        self.stem_bn = BatchNorm2d(widths[0], dtype=dtype)
        self.stem_act = make_activation(act, widths[0], rng, dtype)
        blocks = []
        cin = widths[0]
        for stage, cout in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(cin, cout, stride, act, rng, dtype))
                cin = cout
        self.blocks = Sequential(*blocks)
        self.pool = GlobalAvgPool()
        self.fc = Linear(cin, 10, rng, dtype)

    def forward(self, x):
        x = self.stem_act(self.stem_bn(self.stem(x)))
        return self.fc(self.pool(self.blocks(x)))


def build(spec: ModelSpec, seed=0, dtype=np.float32, **size) -> Module:
    """Construct the network for ``spec`` with deterministic initialisation.

    ``size`` forwards toy-size knobs (``width`` for LeNet-5; ``width`` and
    ``blocks_per_stage`` for ResNet-20) used by gradient checks.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigError(f"expected a ModelSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    if spec.architecture == "lenet5":
        model = LeNet5(spec.activation, rng, dtype, **size)
    else:
        model = ResNet20(spec.activation, rng, dtype, **size)
    model.spec = spec
    return model.assign_paths()


def count_activation_functions(model, kind=None) -> int:
    """Number of distinct activation functions (units) in ``model``.

    With ``kind`` given, only activations of that kind are counted.
    """
    return sum(a.units for a in activations_of(model) if kind is None or a.kind == kind)


def count_parameters(model, include_activations=True) -> int:
    from polyneuron.activations import Activation

    skip = set()
    if not include_activations:
        for m in model.modules():
            if isinstance(m, Activation):
                skip.update(id(p) for p in m.parameters())
    return sum(p.size for p in model.parameters() if id(p) not in skip)
