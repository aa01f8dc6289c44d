"""Small fully-connected networks with hand-written backward passes.

Both the modality encoders and the partition amortizers are tanh MLPs
built from this class; gradients accumulate into the ParamBlocks.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .numerics import Array, ParamBlock, seeded_rng


class Mlp:
    """Dense network: tanh on hidden layers, linear output layer.

    Weights start uniform in +/- sqrt(6 / (fan_in + fan_out)) keyed by
    (seed_key..., layer index); biases start at zero. Re-creating with the
    same key reproduces the draws bit for bit.
    """

    def __init__(self, dims: list[int], name: str, seed_key: tuple[int, ...] | None = None):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ContractError(f"{name}: invalid layer dims {dims}")
        self.dims = [int(d) for d in dims]
        self.name = name
        self.weights: list[ParamBlock] = []
        self.biases: list[ParamBlock] = []
        if seed_key is None:
            seed_key = (0,)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            rng = seeded_rng(*seed_key, i)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(ParamBlock(f"{name}/w{i}", w))
            self.biases.append(ParamBlock(f"{name}/b{i}", np.zeros((1, fan_out))))

    @classmethod
    def from_arrays(cls, name: str, arrays: list[Array]) -> "Mlp":
        """Rebuild a network from alternating [w0, b0, w1, b1, ...] arrays."""
        if len(arrays) < 2 or len(arrays) % 2 != 0:
            raise ContractError(f"{name}: expected alternating weight/bias arrays")
        weights = arrays[0::2]
        dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        net = cls.__new__(cls)
        net.dims = dims
        net.name = name
        net.weights = []
        net.biases = []
        for i, (w, b) in enumerate(zip(arrays[0::2], arrays[1::2])):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (1, dims[i + 1]):
                raise ContractError(f"{name}/layer{i}: inconsistent shapes {w.shape}, {b.shape}")
            net.weights.append(ParamBlock(f"{name}/w{i}", w))
            net.biases.append(ParamBlock(f"{name}/b{i}", b))
        return net

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def blocks(self) -> list[ParamBlock]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def zero_grad(self) -> None:
        for blk in self.blocks():
            blk.zero_grad()

    def copy(self, name: str | None = None) -> "Mlp":
        return Mlp.from_arrays(name or self.name, [blk.value.copy() for blk in self.blocks()])

    def load_values(self, other: "Mlp") -> None:
        """Copy parameter values from another network of identical shape."""
        for mine, theirs in zip(self.blocks(), other.blocks()):
            if mine.value.shape != theirs.value.shape:
                raise ContractError(
                    f"{mine.name}: shape {mine.value.shape} != {theirs.value.shape}"
                )
            mine.value[...] = theirs.value

    def forward(self, x) -> tuple[Array, list[Array]]:
        """Returns (output, activations). activations[0] is the input, then
        each layer's post-activation output; the cache feeds backward()."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.dims[0]:
            raise ContractError(
                f"{self.name}: input shape {h.shape} incompatible with dim {self.dims[0]}"
            )
        acts = [h]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.value + b.value
            h = np.tanh(z) if i < last else z
            acts.append(h)
        return h, acts

    def backward(self, acts: list[Array], upstream) -> Array:
        """Accumulate parameter gradients; returns the gradient on the input."""
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ContractError(
                f"{self.name}: upstream shape {g.shape} != output shape {acts[-1].shape}"
            )
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (1.0 - acts[i + 1] ** 2)
            self.weights[i].grad += acts[i].T @ g
            self.biases[i].grad += g.sum(axis=0, keepdims=True)
            g = g @ self.weights[i].value.T
        return g
