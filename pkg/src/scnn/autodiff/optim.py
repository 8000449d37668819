"""Parameter update rules. Each step consumes the accumulated gradients and
zeroes them afterwards; a parameter arriving without a gradient is an error.
"""

import numpy as np


class MissingGradError(RuntimeError):
    """A parameter reached optimizer_step without an accumulated gradient."""


class _Optimizer:
    def __init__(self, params, lr):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {i} (shape {p.shape}) has no gradient")
            self._update(i, p)
        for p in self.params:
            p.zero_grad()

    def _update(self, i, p):
        raise NotImplementedError


class SGD(_Optimizer):
    def _update(self, i, p):
        p.data -= self.lr * p.grad


class SGDMomentum(_Optimizer):
    def __init__(self, params, lr, momentum=0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p):
        v = self.velocity[i]
        v *= self.momentum
        v += p.grad
        p.data -= self.lr * v


class Adam(_Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        super().step()

    def _update(self, i, p):
        m, v = self.m[i], self.v[i]
        m *= self.beta1
        m += (1.0 - self.beta1) * p.grad
        v *= self.beta2
        v += (1.0 - self.beta2) * p.grad * p.grad
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind, params, lr, **kwargs):
    kinds = {"sgd": SGD, "sgd_momentum": SGDMomentum, "adam": Adam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](params, lr, **kwargs)
