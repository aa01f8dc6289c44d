"""Dense float64 numerics: stable reductions, parameter/gradient storage,
an AdamW optimizer, and the finite-difference gradient oracle.

All verification arithmetic runs in 64-bit. Reductions use numpy's
deterministic summation, so repeated runs on the same platform with the
same inputs are bitwise-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, OracleError

Array = np.ndarray


def seeded_rng(*key: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def logsumexp(values) -> float:
    """log(sum(exp(values))), computed as max + log(sum(exp(v - max))).

    Finite for any finite input; the max-subtraction keeps the exponentials
    in [0, 1].
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("logsumexp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("logsumexp requires finite inputs")
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def row_logsumexp(mat: Array) -> Array:
    """Row-wise logsumexp of a 2-D array.

    -inf entries are allowed as masks, as long as no row is entirely -inf.
    """
    m = np.max(mat, axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DomainError("row_logsumexp: a row has no finite entry")
    return (m + np.log(np.sum(np.exp(mat - m), axis=1, keepdims=True))).ravel()


def l2_normalize_rows(mat) -> tuple[Array, Callable[[Array], Array]]:
    """Normalize each row to unit length. Returns (output, backward).

    backward maps an upstream gradient on the output to the gradient on
    the input through the per-row Jacobian (I - u u^T) / ||z||, where u is
    the normalized row and z the raw row.
    """
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"l2_normalize_rows expects a 2-D array, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has norm {float(norms[bad, 0]):.3e} <= 1e-12")
    out = m / norms

    def backward(upstream) -> Array:
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != out.shape:
            raise ContractError(
                f"upstream gradient shape {g.shape} != output shape {out.shape}"
            )
        radial = np.sum(g * out, axis=1, keepdims=True)
        return (g - radial * out) / norms

    return out, backward


@dataclass
class ParamBlock:
    """A named 2-D parameter matrix with an explicitly managed gradient.

    Gradients accumulate additively; they are cleared only by zero_grad().
    """

    name: str
    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ContractError(f"{self.name}: parameter must be 2-D, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(self.grad, dtype=np.float64)
            if self.grad.shape != self.value.shape:
                raise ContractError(
                    f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
                )

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class AdamW:
    """Adam with decoupled weight decay over a fixed list of ParamBlocks.

    weight_decay = 0 reproduces plain Adam. Decay is skipped for blocks
    whose names appear in no_decay (biases, temperature, ...).
    """

    def __init__(
        self,
        blocks: Sequence[ParamBlock],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        no_decay: Iterable[str] = (),
    ):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        self.blocks = list(blocks)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.no_decay = set(no_decay)
        self.m = {b.name: np.zeros_like(b.value) for b in self.blocks}
        self.v = {b.name: np.zeros_like(b.value) for b in self.blocks}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for b in self.blocks:
            m, v = self.m[b.name], self.v[b.name]
            if b.grad.shape != m.shape:
                raise ContractError(
                    f"{b.name}: grad shape {b.grad.shape} != optimizer state shape {m.shape}"
                )
            if self.weight_decay != 0.0 and b.name not in self.no_decay:
                b.value -= self.lr * self.weight_decay * b.value
            m *= self.beta1
            m += (1.0 - self.beta1) * b.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (b.grad * b.grad)
            b.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def finite_difference_gradient(f: Callable[[Array], float], x, h: float = 1e-6) -> Array:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / (2 h) per coordinate."""
    if h <= 0:
        raise DomainError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite evaluation while perturbing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck_error(analytic, numeric) -> float:
    """Norm-relative gradient-check metric: max|a - n| / max(max|a|, max|n|, 1e-12)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ContractError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-12)
    return float(np.max(np.abs(a - n))) / scale


def max_relative_discrepancy(a, b, floor: float = 1e-6) -> float:
    """Elementwise relative discrepancy max|a - b| / max(|a|, |b|, floor).

    The floor suppresses spurious blow-ups on entries that are zero up to
    rounding; both arrays are expected to carry O(1)-scale entries.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {a.shape} vs {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
