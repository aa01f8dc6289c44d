"""Random-Fourier-feature validation of the spectral form of the partition
function.

For unit vectors u, v the scaled-similarity kernel factorizes as

    exp(tau * <u, v>) = exp(tau) * E_w[cos(sqrt(tau) * <w, u - v>)],
    w ~ N(0, I_d),

so a per-sample partition value is a single inner product between the
sample's feature vector and the mean conjugate feature of the other
modality's batch. Only the real (cosine) part is carried; the exp(tau)
prefactor is applied once analytically.

Estimator variance grows like exp(2 tau); this module validates the
identity at moderate tau and is not the production partition estimator
(the learned amortizer is).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import EmbeddingBatch
from .errors import ContractError, DomainError
from .numerics import Array, seeded_rng

UNIT_TOL = 1e-9


def _box_muller_normals(rng: np.random.Generator, count: int) -> Array:
    """Standard normals via the Box-Muller transform over a uniform stream."""
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps the log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
    return z[:count]


@dataclass(frozen=True)
class RandomFeatureMap:
    """Frozen draw of frequency vectors with the temperature snapshot."""

    omegas: Array  # (m_features, dim) i.i.d. standard normal
    tau: float
    seed: int

    @property
    def m_features(self) -> int:
        return self.omegas.shape[0]

    @property
    def dim(self) -> int:
        return self.omegas.shape[1]


@dataclass(frozen=True)
class KernelEstimate:
    """Monte-Carlo estimate with its empirical standard error."""

    value: float
    stderr: float


def sample_features(m_features: int, dim: int, tau: float, seed: int) -> RandomFeatureMap:
    """Draw m_features frequency vectors from N(0, I_dim), keyed by seed."""
    if m_features < 1 or dim < 1:
        raise DomainError(f"need m_features >= 1 and dim >= 1, got {m_features}, {dim}")
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")
    rng = seeded_rng(seed)
    omegas = _box_muller_normals(rng, m_features * dim).reshape(m_features, dim)
    return RandomFeatureMap(omegas=omegas, tau=float(tau), seed=int(seed))


def _check_unit(u: Array, what: str) -> Array:
    u = np.asarray(u, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(u))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ContractError(f"{what} must be unit-norm, got ||.|| = {norm:.12f}")
    return u


def _estimate_from_samples(per_feature: Array, scale: float) -> KernelEstimate:
    m = per_feature.shape[0]
    value = scale * float(per_feature.mean())
    if float(np.ptp(per_feature)) == 0.0:
        stderr = 0.0  # all samples identical: genuinely zero variance
    elif m >= 2:
        stderr = scale * float(per_feature.std(ddof=1)) / math.sqrt(m)
    else:
        stderr = math.inf
    return KernelEstimate(value=value, stderr=stderr)


def kernel_estimate(u1, u2, fmap: RandomFeatureMap) -> KernelEstimate:
    """Monte-Carlo estimate of exp(tau * <u1, u2>) for unit vectors.

    Identical inputs give exactly exp(tau) with zero sampling variance,
    since every feature contributes cos(0).
    """
    u1 = _check_unit(u1, "u1")
    u2 = _check_unit(u2, "u2")
    if u1.shape[0] != fmap.dim or u2.shape[0] != fmap.dim:
        raise ContractError(f"vectors of dim {u1.shape[0]} do not match feature dim {fmap.dim}")
    proj = (fmap.omegas @ (u1 - u2)) * math.sqrt(fmap.tau)
    return _estimate_from_samples(np.cos(proj), math.exp(fmap.tau))


def imaginary_part_estimate(u1, u2, fmap: RandomFeatureMap) -> float:
    """Mean of sin(sqrt(tau) <w, u1 - u2>); vanishes in expectation by the
    symmetry of the frequency distribution."""
    u1 = _check_unit(u1, "u1")
    u2 = _check_unit(u2, "u2")
    proj = (fmap.omegas @ (u1 - u2)) * math.sqrt(fmap.tau)
    return float(np.sin(proj).mean())


def partition_estimate_mc(u, others: EmbeddingBatch, fmap: RandomFeatureMap) -> KernelEstimate:
    """Estimate of the mean-form partition (1/n) sum_j exp(tau <u, psi_j>)
    via a single inner product against the precomputed mean conjugate
    feature of the batch.

    By linearity this equals the average of kernel_estimate over the batch
    (same feature map), up to rounding.
    """
    u = _check_unit(u, "query")
    if others.n < 1:
        raise ContractError("the complementary batch must be non-empty")
    norms = np.linalg.norm(others.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(f"batch row {bad} is not unit-norm (||.|| = {norms[bad]:.12f})")
    if u.shape[0] != fmap.dim or others.dim != fmap.dim:
        raise ContractError(f"dims {u.shape[0]}/{others.dim} do not match feature dim {fmap.dim}")
    sqrt_tau = math.sqrt(fmap.tau)
    proj_u = (fmap.omegas @ u) * sqrt_tau  # (M,)
    proj_o = (fmap.omegas @ others.data.T) * sqrt_tau  # (M, n)
    mean_cos = np.cos(proj_o).mean(axis=1)
    mean_sin = np.sin(proj_o).mean(axis=1)
    per_feature = np.cos(proj_u) * mean_cos + np.sin(proj_u) * mean_sin
    return _estimate_from_samples(per_feature, math.exp(fmap.tau))
