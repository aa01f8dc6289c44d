"""Self-contained verification suites behind the `verify` CLI command:
finite-difference gradient checks for every exported loss, Monte-Carlo
checks of the spectral partition representation, schedule exactness, and
the gradient equivalence of the two maximum-likelihood forms.

Each check returns {"check", "status", "value", "tolerance"}; a suite
passes only if every check passes. All randomness is seeded.
"""

from __future__ import annotations

import math

import numpy as np

from .amortization import (
    GENERATORS,
    AmortizerParams,
    TargetAmortizer,
    amortize_forward,
    beta_schedule,
    ema_update,
    exact_partition,
    fdiv_weights,
    init_amortizer,
    loss_fdiv,
    loss_fdiv_values,
    loss_l2log,
    loss_l2log_values,
)
from .encoders import EmbeddingBatch, encode, encoder_backward, init_encoders
from .errors import ConfigError
from .losses import (
    RhoSchedule,
    amortized_mle_loss,
    mle_gradient_equivalence_check,
    nce_loss,
    rho_at,
    temperature_rescale,
)
from .numerics import (
    Array,
    ParamBlock,
    finite_difference_gradient,
    gradcheck_error,
    seeded_rng,
)
from .spectral import (
    imaginary_part_estimate,
    kernel_estimate,
    partition_estimate_mc,
    sample_features,
)

FD_STEP = 1e-6
GRAD_TOL = 1e-5


# ---------------------------------------------------------------------------
# parameter flattening helpers (shared with the test suite)


def flatten_blocks(blocks: list[ParamBlock]) -> Array:
    return np.concatenate([b.value.ravel() for b in blocks])


def set_blocks_from_flat(blocks: list[ParamBlock], flat: Array) -> None:
    off = 0
    for b in blocks:
        size = b.value.size
        b.value[...] = flat[off : off + size].reshape(b.value.shape)
        off += size


def flatten_grads(blocks: list[ParamBlock]) -> Array:
    return np.concatenate([b.grad.ravel() for b in blocks])


def _check(name: str, value: float, tolerance, ok: bool) -> dict:
    return {
        "check": name,
        "status": "pass" if ok else "fail",
        "value": value,
        "tolerance": tolerance,
    }


def _unit_batch(rng: np.random.Generator, n: int, d: int, modality: str) -> EmbeddingBatch:
    raw = rng.standard_normal((n, d))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return EmbeddingBatch(data=raw, modality=modality)


# ---------------------------------------------------------------------------
# gradcheck suite


def _gradcheck_pair_loss(loss_kind: str, seed: int) -> float:
    """FD check over both embedding batches and log(tau) for a pair loss."""
    rng = seeded_rng(9100, seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    emb_a = _unit_batch(rng, n, d, "a")
    emb_b = _unit_batch(rng, n, d, "b")
    tau = float(rng.uniform(0.5, 4.0))
    log_lam_a = rng.standard_normal(n)
    log_lam_b = rng.standard_normal(n)
    rho = float(rng.uniform(-8.0, 8.0))

    def split(flat: Array):
        a = flat[: n * d].reshape(n, d)
        b = flat[n * d : 2 * n * d].reshape(n, d)
        return a, b, float(flat[-1])

    def raw_loss(a: Array, b: Array, t: float):
        ea = EmbeddingBatch(data=a, modality="a")
        eb = EmbeddingBatch(data=b, modality="b")
        if loss_kind == "nce":
            return nce_loss(ea, eb, t)
        if loss_kind == "mle":
            return amortized_mle_loss(ea, eb, t, log_lam_a, log_lam_b)
        raise ValueError(loss_kind)

    if loss_kind == "rescale":

        def f(flat: Array) -> float:
            a, b, lt = split(flat)
            t = math.exp(lt)
            raw = nce_loss(EmbeddingBatch(a, "a"), EmbeddingBatch(b, "b"), t)
            return raw.value / tau + rho / t  # divisor frozen at the base tau

        out = temperature_rescale(nce_loss(emb_a, emb_b, tau), tau, rho)
    else:

        def f(flat: Array) -> float:
            a, b, lt = split(flat)
            return raw_loss(a, b, math.exp(lt)).value

        out = raw_loss(emb_a.data, emb_b.data, tau)

    x0 = np.concatenate([emb_a.data.ravel(), emb_b.data.ravel(), [math.log(tau)]])
    numeric = finite_difference_gradient(f, x0, FD_STEP)
    analytic = np.concatenate([out.grad_a.ravel(), out.grad_b.ravel(), [out.tau_grad * tau]])
    return gradcheck_error(analytic, numeric)


def _gradcheck_amortizer_loss(objective: str, seed: int) -> float:
    """FD check over the amortizer parameters for one amortization loss."""
    rng = seeded_rng(9200, seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 13))
    emb = _unit_batch(rng, n, d, "a")
    other = _unit_batch(rng, n, d, "b")
    tau = float(rng.uniform(0.5, 2.0))
    log_z = exact_partition(emb, other, tau).log_z_exact
    theta = init_amortizer(d, 0.5, "a", (seed, 9201))
    blocks = theta.blocks()
    x0 = flatten_blocks(blocks)

    if objective == "l2log":
        weights = None
        gen = None
    else:
        gen = GENERATORS[objective]
        weights = fdiv_weights(emb.data @ other.data.T, tau, log_z)

    def f(flat: Array) -> float:
        set_blocks_from_flat(blocks, flat)
        log_lam, _ = amortize_forward(theta, emb)
        if objective == "l2log":
            return loss_l2log_values(log_lam, log_z)[0]
        return loss_fdiv_values(log_lam, log_z, gen, weights)[0]

    set_blocks_from_flat(blocks, x0)
    theta.zero_grad()
    if objective == "l2log":
        loss_l2log(theta, emb, log_z)
    else:
        loss_fdiv(theta, emb, tau, log_z, gen, weights)
    analytic = flatten_grads(blocks)
    numeric = finite_difference_gradient(f, x0, FD_STEP)
    set_blocks_from_flat(blocks, x0)
    return gradcheck_error(analytic, numeric)


def _gradcheck_encoder(seed: int) -> float:
    """FD check over encoder parameters against a linear probe of the embeddings."""
    rng = seeded_rng(9300, seed)
    n = int(rng.integers(2, 7))
    d = int(rng.integers(2, 9))
    dim_in = {"a": int(rng.integers(2, 8)), "b": int(rng.integers(2, 8))}
    params = init_encoders(dim_in, hidden=6, depth=1, embed_dim=d, seed=seed)
    x = rng.standard_normal((n, dim_in["a"]))
    probe = rng.standard_normal((n, d))
    blocks = params.nets["a"].blocks()
    x0 = flatten_blocks(blocks)

    def f(flat: Array) -> float:
        set_blocks_from_flat(blocks, flat)
        emb, _ = encode(params, x, "a")
        return float(np.sum(emb.data * probe))

    set_blocks_from_flat(blocks, x0)
    params.zero_grad()
    _, cache = encode(params, x, "a")
    encoder_backward(cache, probe)
    analytic = flatten_grads(blocks)
    numeric = finite_difference_gradient(f, x0, FD_STEP)
    set_blocks_from_flat(blocks, x0)
    return gradcheck_error(analytic, numeric)


def _gradcheck_amortize_forward(seed: int) -> float:
    """FD check over amortizer parameters against a linear probe of log lambda."""
    rng = seeded_rng(9400, seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 13))
    emb = _unit_batch(rng, n, d, "a")
    probe = rng.standard_normal(n)
    theta = init_amortizer(d, 0.75, "a", (seed, 9401))
    blocks = theta.blocks()
    x0 = flatten_blocks(blocks)

    def f(flat: Array) -> float:
        set_blocks_from_flat(blocks, flat)
        log_lam, _ = amortize_forward(theta, emb)
        return float(np.dot(log_lam, probe))

    set_blocks_from_flat(blocks, x0)
    theta.zero_grad()
    log_lam, cache = amortize_forward(theta, emb)
    from .amortization import amortize_backward

    amortize_backward(cache, probe)
    analytic = flatten_grads(blocks)
    numeric = finite_difference_gradient(f, x0, FD_STEP)
    set_blocks_from_flat(blocks, x0)
    return gradcheck_error(analytic, numeric)


def suite_gradcheck(instances: int = 20) -> list[dict]:
    checks = []
    families = [
        ("gradcheck/nce_loss", lambda s: _gradcheck_pair_loss("nce", s)),
        ("gradcheck/amortized_mle_loss", lambda s: _gradcheck_pair_loss("mle", s)),
        ("gradcheck/temperature_rescale", lambda s: _gradcheck_pair_loss("rescale", s)),
        ("gradcheck/loss_l2log", lambda s: _gradcheck_amortizer_loss("l2log", s)),
        ("gradcheck/encoder_backward", _gradcheck_encoder),
        ("gradcheck/amortize_forward", _gradcheck_amortize_forward),
    ]
    for gen_name in GENERATORS:
        families.append(
            (f"gradcheck/loss_fdiv_{gen_name}", lambda s, g=gen_name: _gradcheck_amortizer_loss(g, s))
        )
    for name, fn in families:
        worst = max(fn(s) for s in range(instances))
        checks.append(_check(name, worst, GRAD_TOL, worst < GRAD_TOL))
    return checks


# ---------------------------------------------------------------------------
# spectral suite


def _pair_with_similarity(d: int, s: float) -> tuple[Array, Array]:
    u1 = np.zeros(d)
    u1[0] = 1.0
    u2 = np.zeros(d)
    u2[0] = s
    u2[1] = math.sqrt(max(0.0, 1.0 - s * s))
    return u1, u2


def suite_spectral(m_features: int = 200_000, trials: int = 100) -> list[dict]:
    checks = []
    d = 4
    taus = (1.0, 2.0, 4.0)
    sims = (-0.5, 0.0, 0.5, 1.0)

    # 3-standard-error coverage of the kernel estimate, per (tau, s)
    for ti, tau in enumerate(taus):
        worst_fraction = 1.0
        hits = {s: 0 for s in sims}
        for trial in range(trials):
            fmap = sample_features(m_features, d, tau, seed=90_000 + 1000 * ti + trial)
            for s in sims:
                u1, u2 = _pair_with_similarity(d, s)
                est = kernel_estimate(u1, u2, fmap)
                if abs(est.value - math.exp(tau * s)) <= 3.0 * est.stderr:
                    hits[s] += 1
        worst_fraction = min(h / trials for h in hits.values())
        checks.append(
            _check(f"spectral/coverage_tau_{tau:g}", worst_fraction, 0.95, worst_fraction >= 0.95)
        )

    # partition estimate against the exact batch partition, 3-SE z-scores
    max_z = 0.0
    tau = 1.0
    for b in range(5):
        rng = seeded_rng(91_000, b)
        batch = _unit_batch(rng, 8, d, "b")
        query = _unit_batch(rng, 8, d, "a")
        pe = exact_partition(query, batch, tau)
        fmap = sample_features(m_features, d, tau, seed=92_000 + b)
        for i in range(8):
            est = partition_estimate_mc(query.data[i], batch, fmap)
            z = abs(est.value - math.exp(pe.log_z_exact[i])) / est.stderr
            max_z = max(max_z, z)
    checks.append(_check("spectral/partition_vs_exact", max_z, 3.0, max_z <= 3.0))

    # O(1/sqrt(M)) error decay: quadrupling M should halve the RMSE
    tau, s = 2.0, 0.5
    m0 = max(10, m_features // 50)
    u1, u2 = _pair_with_similarity(d, s)
    truth = math.exp(tau * s)
    errs0, errs1 = [], []
    for seed in range(50):
        e0 = kernel_estimate(u1, u2, sample_features(m0, d, tau, seed=93_000 + seed))
        e1 = kernel_estimate(u1, u2, sample_features(4 * m0, d, tau, seed=94_000 + seed))
        errs0.append((e0.value - truth) ** 2)
        errs1.append((e1.value - truth) ** 2)
    ratio = math.sqrt(sum(errs1) / len(errs1)) / math.sqrt(sum(errs0) / len(errs0))
    checks.append(
        _check("spectral/rmse_ratio_4x_features", ratio, "[0.3333, 0.75]", 1.0 / 3.0 <= ratio <= 0.75)
    )

    # imaginary part of the feature product vanishes by symmetry
    fmap = sample_features(m_features, d, 2.0, seed=95_000)
    imag = abs(imaginary_part_estimate(*_pair_with_similarity(d, 0.5), fmap))
    bound = 3.0 / math.sqrt(m_features)
    checks.append(_check("spectral/imaginary_part", imag, bound, imag <= bound))

    # precision gate: the estimator is only useful once the relative
    # standard error is small; deliberately tiny feature counts fail here
    est = kernel_estimate(u1, u2, fmap)
    rel_se = est.stderr / abs(est.value)
    checks.append(_check("spectral/relative_se", rel_se, 0.01, rel_se <= 0.01))
    return checks


# ---------------------------------------------------------------------------
# schedules suite


def suite_schedules() -> list[dict]:
    checks = []
    total, beta_final = 10, 0.8
    dev = max(
        abs(beta_schedule(0, total, beta_final) - 0.0),
        abs(beta_schedule(total, total, beta_final) - beta_final),
        abs(beta_schedule(total // 2, total, beta_final) - beta_final / 2.0),
    )
    checks.append(_check("schedules/beta_endpoints", dev, 1e-12, dev <= 1e-12))

    values = [beta_schedule(t, total, beta_final) for t in range(total + 1)]
    monotone = all(b >= a for a, b in zip(values, values[1:]))
    checks.append(_check("schedules/beta_monotone", float(monotone), 1.0, monotone))

    worst = 0.0
    for alpha in (0.92, 0.999):
        online = init_amortizer(6, 0.5, "a", (1, 77))
        target = TargetAmortizer(
            ema=AmortizerParams(net=online.net.copy("ema"), modality="a", dim_factor=0.5),
            prev_epoch=AmortizerParams(net=online.net.copy("prev"), modality="a", dim_factor=0.5),
            alpha=alpha,
        )
        for blk in target.ema.blocks():
            blk.value.fill(0.0)
        for blk in online.blocks():
            blk.value.fill(1.0)
        k = 50
        for _ in range(k):
            ema_update(target, online, alpha)
        expected = alpha**k
        for blk in target.ema.blocks():
            gap = np.abs(blk.value - 1.0)  # |theta_hat_k - theta| should be alpha^k
            worst = max(worst, float(np.max(np.abs(gap - expected))) / expected)
    checks.append(_check("schedules/ema_geometric", worst, 1e-9, worst <= 1e-9))

    sched = RhoSchedule(6.5, -8.0, 0.75)
    ok = (
        rho_at(22, 30, sched) == 6.5
        and rho_at(23, 30, sched) == -8.0
        and rho_at(30, 30, sched) == -8.0
        and all(rho_at(e, 30, RhoSchedule(6.5, -8.0, 1.0)) == 6.5 for e in range(1, 31))
    )
    checks.append(_check("schedules/rho_boundaries", float(ok), 1.0, ok))
    return checks


# ---------------------------------------------------------------------------
# gradient-equivalence suite


def suite_equivalence(batches: int = 20) -> list[dict]:
    checks = []
    for tau, n, tol in ((1.0, None, 1e-10), (10.0, 8, 1e-8)):
        worst = 0.0
        for seed in range(batches):
            rng = seeded_rng(9700, int(tau * 10), seed)
            nn = n if n is not None else int(rng.integers(4, 9))
            emb_a = _unit_batch(rng, nn, 8, "a")
            emb_b = _unit_batch(rng, nn, 8, "b")
            worst = max(worst, mle_gradient_equivalence_check(emb_a, emb_b, tau))
        checks.append(
            _check(f"equivalence/mle_forms_tau_{tau:g}", worst, tol, worst < tol)
        )
    return checks


SUITES = {
    "gradcheck": suite_gradcheck,
    "spectral": suite_spectral,
    "schedules": suite_schedules,
    "equivalence": suite_equivalence,
}


def run_suite(name: str, **kwargs) -> list[dict]:
    if name not in SUITES:
        raise ConfigError(f"unknown verification suite {name!r}, expected one of {sorted(SUITES)}")
    return SUITES[name](**kwargs)
