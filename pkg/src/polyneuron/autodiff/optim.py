from __future__ import annotations

import numpy as np

from polyneuron.exceptions import UsageError


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay ``p <- p * (1 - lr * weight_decay)`` is skipped for tensors flagged
    ``decay_exempt``; this is how activation parameters stay undecayed.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        if lr < 0 or weight_decay < 0:
            raise UsageError("learning rate and weight decay must be nonnegative")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def param_groups(self):
        decayed = [p for p in self.params if not p.decay_exempt]
        exempt = [p for p in self.params if p.decay_exempt]
        return [
            {"params": decayed, "weight_decay": self.weight_decay},
            {"params": exempt, "weight_decay": 0.0},
        ]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is None and not p.decay_exempt:
                raise UsageError(f"parameter {p.name or p.shape} has no gradient; call backward() first")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and not p.decay_exempt:
                p.data *= 1.0 - self.lr * self.weight_decay
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def state_meta(self):
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step_count,
        }

    def load_state(self, meta, arrays):
        self.lr = meta["lr"]
        self.beta1, self.beta2 = meta["betas"]
        self.eps = meta["eps"]
        self.weight_decay = meta["weight_decay"]
        self.step_count = int(meta["step"])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=self.params[i].dtype)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=self.params[i].dtype)
