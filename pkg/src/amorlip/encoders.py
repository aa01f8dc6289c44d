"""Two modality-specific MLP encoders producing unit-norm embeddings in a
shared space, plus the learnable softmax temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError
from .net import Mlp
from .numerics import Array, ParamBlock, l2_normalize_rows

MODALITIES = ("a", "b")

ENCODER_SEED_SALT = 1001


class Temperature:
    """Learnable scalar temperature stored as log(tau) with an upper clamp.

    The exposed value is exp(log_tau) clamped to (0, tau_max]; clamp() is
    applied by the trainer after every optimizer step.
    """

    def __init__(self, init_tau: float = 1.0 / 0.07, tau_max: float = 100.0):
        if init_tau <= 0 or tau_max <= 0:
            raise DomainError(f"temperatures must be positive, got init {init_tau}, max {tau_max}")
        self.block = ParamBlock("temperature/log_tau", np.array([[math.log(init_tau)]]))
        self.tau_max = float(tau_max)

    @property
    def log_tau(self) -> float:
        return float(self.block.value[0, 0])

    @property
    def tau(self) -> float:
        return min(math.exp(self.log_tau), self.tau_max)

    def clamp(self) -> None:
        cap = math.log(self.tau_max)
        if self.block.value[0, 0] > cap:
            self.block.value[0, 0] = cap

    def accumulate_tau_grad(self, tau_grad: float) -> None:
        """Chain a d(loss)/d(tau) value through tau = exp(log_tau)."""
        self.block.grad[0, 0] += tau_grad * self.tau


@dataclass
class EmbeddingBatch:
    """A batch of unit-norm rows for one modality, tagged with provenance."""

    data: Array
    modality: str
    step: int = -1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractError(f"embeddings must be 2-D, got shape {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class EncoderParams:
    """One MLP per modality; both output the same embedding dimension."""

    nets: dict[str, Mlp]

    def net(self, modality: str) -> Mlp:
        if modality not in self.nets:
            raise ContractError(f"unknown modality {modality!r}, expected one of {MODALITIES}")
        return self.nets[modality]

    def blocks(self) -> list[ParamBlock]:
        out = []
        for m in MODALITIES:
            out.extend(self.nets[m].blocks())
        return out

    def zero_grad(self) -> None:
        for blk in self.blocks():
            blk.zero_grad()

    @property
    def embed_dim(self) -> int:
        return self.nets[MODALITIES[0]].dims[-1]


def init_encoders(
    input_dims: dict[str, int],
    hidden: int = 64,
    depth: int = 2,
    embed_dim: int = 32,
    seed: int = 0,
) -> EncoderParams:
    """Fresh encoder parameters; draws are keyed by (seed, salt, modality, layer)."""
    if set(input_dims) != set(MODALITIES):
        raise ContractError(f"input_dims must cover modalities {MODALITIES}")
    if depth < 0 or hidden < 1 or embed_dim < 1:
        raise ContractError(f"invalid encoder sizes: hidden={hidden}, depth={depth}, d={embed_dim}")
    nets = {}
    for idx, m in enumerate(MODALITIES):
        dims = [input_dims[m]] + [hidden] * depth + [embed_dim]
        nets[m] = Mlp(dims, f"encoder_{m}", seed_key=(seed, ENCODER_SEED_SALT, idx))
    return EncoderParams(nets=nets)


@dataclass
class EncodeCache:
    modality: str
    net: Mlp
    acts: list[Array]
    norm_backward: Callable[[Array], Array]
    out_shape: tuple[int, int]


def encode(params: EncoderParams, inputs, modality: str, step: int = -1):
    """Map raw inputs to unit-norm embeddings. Returns (EmbeddingBatch, cache).

    Pure function of (params, inputs): repeated calls agree bitwise.
    """
    net = params.net(modality)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise ContractError(
            f"modality {modality!r} expects input dim {net.dims[0]}, got shape {x.shape}"
        )
    if x.shape[0] < 1:
        raise ContractError("encode requires at least one row")
    raw, acts = net.forward(x)
    emb, norm_backward = l2_normalize_rows(raw)
    cache = EncodeCache(
        modality=modality, net=net, acts=acts, norm_backward=norm_backward, out_shape=emb.shape
    )
    return EmbeddingBatch(data=emb, modality=modality, step=step), cache


def encoder_backward(cache: EncodeCache, upstream) -> Array:
    """Backpropagate an embedding gradient into the encoder's ParamBlocks.

    Gradients accumulate additively. Returns the gradient on the raw inputs.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.out_shape:
        raise ContractError(f"upstream shape {g.shape} != embedding shape {cache.out_shape}")
    g_raw = cache.norm_backward(g)
    return cache.net.backward(cache.acts, g_raw)


def similarity_matrix(emb_a: EmbeddingBatch, emb_b: EmbeddingBatch) -> Array:
    """Pairwise dot products S[i, j] = <row_i(emb_a), row_j(emb_b)>."""
    if emb_a.dim != emb_b.dim:
        raise ContractError(f"embedding dims differ: {emb_a.dim} vs {emb_b.dim}")
    if emb_a.n != emb_b.n:
        raise ContractError(f"batch sizes differ: {emb_a.n} vs {emb_b.n}")
    return emb_a.data @ emb_b.data.T
