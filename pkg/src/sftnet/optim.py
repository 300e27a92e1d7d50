"""Parameter storage and the Adam optimizer."""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


class ParamStore:
    """Named, ordered trainable tensors plus non-trainable buffers.

    Buffers hold state such as batch-norm running statistics; they are
    serialized with the parameters but never touched by the optimizer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.buffers = OrderedDict()

    def add(self, name, data, trainable=True):
        if name in self.params or name in self.buffers:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=trainable)
        (self.params if trainable else self.buffers)[name] = t
        return t

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        if name in self.buffers:
            return self.buffers[name]
        raise ParameterError(f"unknown parameter {name!r}")

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def __len__(self):
        return len(self.params)

    def items(self):
        """All tensors, parameters first, each group in insertion order."""
        yield from self.params.items()
        yield from self.buffers.items()

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype):
        """Copy of the store with every tensor cast to ``dtype``."""
        out = ParamStore(dtype)
        for name, t in self.params.items():
            out.add(name, t.data, trainable=True)
        for name, t in self.buffers.items():
            out.add(name, t.data, trainable=False)
        return out

    def copy(self):
        return self.astype(self.dtype)


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, store, **hypers):
        state = cls(**hypers)
        for name, p in store.named_parameters():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(store, state):
    """One bias-corrected Adam update of every parameter in ``store``.

    Raises :class:`ParameterError` naming the first parameter without a
    gradient; in that case neither the parameters nor the state change.
    """
    for name, p in store.named_parameters():
        if p.grad is None:
            raise ParameterError(f"parameter {name!r} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in store.named_parameters():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return store, state
