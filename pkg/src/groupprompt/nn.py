"""Parameter containers and the layers shared by the network pieces."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Ordered tree of named parameters.

    Parameters are registered explicitly so that names and iteration order are
    stable; checkpoints and optimizer state depend on both.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(value, requires_grad=True, trainable=True, name=name)
        self._params[name] = p
        return p

    def share_param(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing tensor (shared by identity, not copied)."""
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child._walk(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
            p.trainable = False
            p.requires_grad = False
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


class Linear(Module):
    def __init__(self, rng: Rng, fan_in: int, fan_out: int, bias: bool = True,
                 zero: bool = False):
        super().__init__()
        w = np.zeros((fan_in, fan_out)) if zero else xavier(rng, fan_in, fan_out)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(dim))
        self.shift = self.add_param("shift", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class MLP(Module):
    """Two fully connected layers with GELU in between."""

    def __init__(self, rng: Rng, dim_in: int, hidden: int, dim_out: int, zero_last: bool = False):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(rng.spawn("fc1"), dim_in, hidden))
        self.fc2 = self.add_child("fc2", Linear(rng.spawn("fc2"), hidden, dim_out, zero=zero_last))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         bias: np.ndarray | None = None, keep: list | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    Inputs are ``[..., N, D]``; ``bias`` (broadcastable to ``[..., heads, N, N]``)
    is added to the logits.  When ``keep`` is a list the probability tensor is
    appended to it.
    """
    *lead, n, d = q.shape
    dh = d // heads
    m = k.shape[-2]

    def split_heads(x, length):
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return T.transpose(T.reshape(x, (*lead, length, heads, dh)), axes)

    qh, kh, vh = split_heads(q, n), split_heads(k, m), split_heads(v, m)
    logits = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    prob = T.softmax(logits, axis=-1)
    if keep is not None:
        keep.append(prob)
    out = T.matmul(prob, vh)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(out, axes), (*lead, n, d))
