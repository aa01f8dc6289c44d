"""The two-stage training loop (amortization, then representation learning),
the NCE/CLIP baseline trainer, gather-invocation accounting, JSONL metrics,
and the AMCK1 checkpoint format.

Single-process execution; distributed gathers are modeled by a counter:
the baseline gathers every step, the amortized trainer only when the
amortization stage runs (once per trigger, regardless of inner iterations).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import time
from dataclasses import dataclass
from typing import IO

import numpy as np

from .amortization import (
    GENERATORS,
    AmortizerParams,
    TargetAmortizer,
    amortize_backward,
    amortize_forward,
    beta_schedule,
    combined_target,
    ema_update,
    exact_partition,
    fdiv_weights,
    init_amortizer,
    loss_fdiv_values,
    loss_l2log,
    loss_l2log_values,
)
from .data import PairedDataset, make_batch_plan, split_eval
from .encoders import (
    MODALITIES,
    EmbeddingBatch,
    EncoderParams,
    Temperature,
    encode,
    encoder_backward,
    init_encoders,
    similarity_matrix,
)
from .errors import ConfigError, ContractError, DomainError, FormatError, TrainingDivergence
from .losses import RhoSchedule, amortized_mle_loss, nce_loss, rho_at, temperature_rescale
from .net import Mlp
from .numerics import AdamW, Array

AMORTIZER_INIT_SALT = 2001
AMORTIZER_REINIT_SALT = 5501
FIDELITY_SALT = 6601

METHODS = ("amorlip", "clip")
OBJECTIVES = ("l2log", "fdiv")
TRAIN_GENERATORS = ("kl", "kl_affine", "js")

CKPT_MAGIC = b"AMCK1\n"


@dataclass
class TrainConfig:
    """Every knob of the training loop. The JSON config file is a flat
    object mirroring these field names; CLI flags override file values."""

    method: str = "amorlip"
    objective: str = "l2log"
    generator: str = "kl_affine"
    epochs: int = 10
    batch_size: int = 64
    embed_dim: int = 32
    encoder_hidden: int = 64
    encoder_depth: int = 2
    f_d: float = 0.5
    t_lambda: int = 3
    t_online: int = 8
    t_target: int = 2
    alpha: float = 0.999
    beta_final: float = 0.8
    include_positive: bool = True
    lr_encoder: float = 1e-3
    lr_amortizer: float = 1e-3
    weight_decay: float = 0.01
    fdiv_l2log_coef: float = 0.1
    rho_main: float = 6.5
    rho_anneal: float = -8.0
    anneal_start_fraction: float = 0.75
    tau_init: float = 1.0 / 0.07
    tau_max: float = 100.0
    eval_fraction: float = 0.1
    seed: int = 7
    log_every: int = 10

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.generator not in TRAIN_GENERATORS:
            raise ConfigError(
                f"generator must be one of {TRAIN_GENERATORS}, got {self.generator!r}"
            )
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError(f"need epochs >= 1 and batch_size >= 2, got {self.epochs}, {self.batch_size}")
        if min(self.t_lambda, self.t_online, self.t_target) < 1:
            raise ConfigError("t_lambda, t_online and t_target must all be >= 1")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta_final <= 1.0):
            raise ConfigError("alpha and beta_final must lie in [0, 1]")
        if self.embed_dim < 1 or self.encoder_hidden < 1 or self.encoder_depth < 0:
            raise ConfigError("invalid encoder sizes")
        if self.f_d <= 0:
            raise ConfigError(f"f_d must be positive, got {self.f_d}")
        if self.lr_encoder <= 0 or self.lr_amortizer <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0 or self.fdiv_l2log_coef < 0:
            raise ConfigError("weight_decay and fdiv_l2log_coef must be >= 0")
        if not 0.0 <= self.anneal_start_fraction <= 1.0:
            raise ConfigError("anneal_start_fraction must lie in [0, 1]")
        if self.tau_init <= 0 or self.tau_max <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(os.fspath(path)) as fh:
            try:
                values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a flat JSON object")
        return cls.from_dict(values)

    def rho_schedule(self) -> RhoSchedule:
        return RhoSchedule(self.rho_main, self.rho_anneal, self.anneal_start_fraction)


@dataclass
class TrainState:
    """All mutable training state, owned by a single logical thread."""

    config: TrainConfig
    encoders: EncoderParams
    temperature: Temperature
    online: dict[str, AmortizerParams] | None
    targets: dict[str, TargetAmortizer] | None
    opt_encoder: AdamW
    opt_amortizer: AdamW | None
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    gather_count: int = 0


class MetricsWriter:
    """Collects metric records in memory and optionally appends JSONL."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh: IO[str] | None = open(os.fspath(path), "w") if path is not None else None

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _copy_amortizer(src: AmortizerParams, net_name: str) -> AmortizerParams:
    return AmortizerParams(
        net=src.net.copy(name=net_name), modality=src.modality, dim_factor=src.dim_factor
    )


def init_train_state(cfg: TrainConfig, ds: PairedDataset) -> TrainState:
    """Fresh encoders, temperature, amortizers (for the amortized method)
    and their optimizers, all seeded from cfg.seed."""
    cfg.validate()
    encoders = init_encoders(
        {"a": ds.dim_a, "b": ds.dim_b},
        hidden=cfg.encoder_hidden,
        depth=cfg.encoder_depth,
        embed_dim=cfg.embed_dim,
        seed=cfg.seed,
    )
    temperature = Temperature(cfg.tau_init, cfg.tau_max)
    no_decay = {b.name for net in encoders.nets.values() for b in net.biases}
    no_decay.add(temperature.block.name)
    opt_encoder = AdamW(
        encoders.blocks() + [temperature.block],
        lr=cfg.lr_encoder,
        weight_decay=cfg.weight_decay,
        no_decay=no_decay,
    )
    online = targets = None
    opt_amortizer = None
    if cfg.method == "amorlip":
        online = {}
        targets = {}
        for i, m in enumerate(MODALITIES):
            onl = init_amortizer(cfg.embed_dim, cfg.f_d, m, (cfg.seed, AMORTIZER_INIT_SALT, i))
            online[m] = onl
            targets[m] = TargetAmortizer(
                ema=_copy_amortizer(onl, f"target_{m}"),
                prev_epoch=_copy_amortizer(onl, f"prev_{m}"),
                alpha=cfg.alpha,
            )
        opt_amortizer = _fresh_amortizer_optimizer(cfg, online)
    return TrainState(
        config=cfg,
        encoders=encoders,
        temperature=temperature,
        online=online,
        targets=targets,
        opt_encoder=opt_encoder,
        opt_amortizer=opt_amortizer,
    )


def _fresh_amortizer_optimizer(cfg: TrainConfig, online: dict[str, AmortizerParams]) -> AdamW:
    blocks = []
    for m in MODALITIES:
        blocks.extend(online[m].blocks())
    return AdamW(blocks, lr=cfg.lr_amortizer, weight_decay=0.0)


def _rotate_and_reinit(state: TrainState, epoch: int) -> None:
    """Epoch boundary: freeze the current target as the previous-epoch
    snapshot, then re-initialize the online and target networks with fresh
    draws keyed by (seed, epoch)."""
    cfg = state.config
    for i, m in enumerate(MODALITIES):
        tgt = state.targets[m]
        tgt.prev_epoch.net.load_values(tgt.ema.net)
        fresh = init_amortizer(
            cfg.embed_dim, cfg.f_d, m, (cfg.seed, AMORTIZER_REINIT_SALT, epoch, i)
        )
        state.online[m] = fresh
        tgt.ema.net.load_values(fresh.net)
    state.opt_amortizer = _fresh_amortizer_optimizer(cfg, state.online)


def _embed(state: TrainState, ds: PairedDataset, idx: Array, step: int):
    emb = {}
    caches = {}
    batches = {"a": ds.mod_a[idx], "b": ds.mod_b[idx]}
    for m in MODALITIES:
        emb[m], caches[m] = encode(state.encoders, batches[m].astype(np.float64), m, step=step)
    return emb, caches


def _check_finite(value: float, what: str, snapshot: dict) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite {what} at step {snapshot.get('step')}", snapshot)


def _median_log_gap(log_lam: dict[str, Array], log_z: dict[str, Array]) -> float:
    gaps = np.concatenate([np.abs(log_lam[m] - log_z[m]) for m in MODALITIES])
    return float(np.median(gaps))


def _record(
    state: TrainState,
    *,
    stage2_raw: float,
    stage2_rescaled: float,
    amor_loss: float | None,
    tau: float,
    beta_t: float | None,
    rho: float,
    median_err: float | None,
    wall_start: float,
) -> dict:
    # tau is the value the step's losses used (pre-update), so every field
    # except wall_ms is a pure function of the step
    return {
        "step": state.global_step,
        "epoch": state.epoch,
        "stage2_loss_raw": stage2_raw,
        "stage2_loss_rescaled": stage2_rescaled,
        "amor_loss": amor_loss,
        "tau": tau,
        "beta_t": beta_t,
        "rho": rho,
        "median_abs_log_z_err": median_err,
        "gather_count": state.gather_count,
        "wall_ms": int((time.perf_counter() - wall_start) * 1000.0),
    }


def _should_log(cfg: TrainConfig, global_step: int, total_steps: int) -> bool:
    return (
        global_step == 1
        or global_step == total_steps
        or global_step % cfg.log_every == 0
    )


def run_amorlip(
    cfg: TrainConfig,
    ds: PairedDataset,
    metrics: MetricsWriter | None = None,
    start_state: TrainState | None = None,
    max_steps: int | None = None,
) -> TrainState:
    """Amortized two-stage training over the held-in split of ds.

    Per epoch the previous target network is frozen, the online and target
    amortizers are re-initialized, and per batch: exact partitions are
    blended with the frozen target via the beta schedule; every t_online
    batches the online amortizers take t_lambda optimizer steps on the
    chosen objective (one gather); every t_target batches the target EMA
    advances; every batch the encoders and temperature take one step on
    the rescaled amortized maximum-likelihood loss.
    """
    cfg.validate()
    if cfg.method != "amorlip":
        raise ConfigError(f"run_amorlip requires method='amorlip', got {cfg.method!r}")
    train_ds, _ = split_eval(ds, cfg.eval_fraction, cfg.seed)
    if train_ds.n < cfg.batch_size:
        raise ConfigError("training split smaller than one batch")
    state = start_state if start_state is not None else init_train_state(cfg, ds)
    steps_per_epoch = train_ds.n // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    sched = cfg.rho_schedule()
    gen = GENERATORS[cfg.generator]
    wall_start = time.perf_counter()

    for t in range(max(state.epoch, 1), cfg.epochs + 1):
        resuming_mid = t == state.epoch and state.step_in_epoch > 0
        if not resuming_mid:
            _rotate_and_reinit(state, t)
            state.epoch = t
            state.step_in_epoch = 0
        skip = state.step_in_epoch
        beta_t = beta_schedule(t, cfg.epochs, cfg.beta_final)
        rho = rho_at(t, cfg.epochs, sched)
        plan = make_batch_plan(train_ds.n, cfg.batch_size, cfg.seed, t)
        for k, idx in enumerate(plan.batches(), start=1):
            if k <= skip:
                continue
            if max_steps is not None and state.global_step >= max_steps:
                return state
            state.global_step += 1
            tau = state.temperature.tau
            emb, caches = _embed(state, train_ds, idx, state.global_step)
            pe = {
                "a": exact_partition(emb["a"], emb["b"], tau, cfg.include_positive),
                "b": exact_partition(emb["b"], emb["a"], tau, cfg.include_positive),
            }
            log_zema = {
                m: combined_target(
                    pe[m].log_z_exact, state.targets[m].prev_epoch, emb[m], beta_t
                )
                for m in MODALITIES
            }
            for m in MODALITIES:
                pe[m].log_z_combined = log_zema[m]

            amor_loss_val: float | None = None
            if k % cfg.t_online == 0:
                sims = {"a": None, "b": None}
                if cfg.objective == "fdiv":
                    s_ab = similarity_matrix(emb["a"], emb["b"])
                    sims = {"a": s_ab, "b": s_ab.T}
                weights = {
                    m: fdiv_weights(sims[m], tau, log_zema[m])
                    for m in MODALITIES
                    if sims[m] is not None
                }
                for _ in range(cfg.t_lambda):
                    total = 0.0
                    for m in MODALITIES:
                        state.online[m].zero_grad()
                    for m in MODALITIES:
                        if cfg.objective == "l2log":
                            total += loss_l2log(state.online[m], emb[m], log_zema[m])
                        else:
                            log_lam, cache = amortize_forward(state.online[m], emb[m])
                            val, grad = loss_fdiv_values(log_lam, log_zema[m], gen, weights[m])
                            if cfg.fdiv_l2log_coef > 0.0:
                                val_l2, grad_l2 = loss_l2log_values(log_lam, log_zema[m])
                                val += cfg.fdiv_l2log_coef * val_l2
                                grad = grad + cfg.fdiv_l2log_coef * grad_l2
                            amortize_backward(cache, grad)
                            total += val
                    state.opt_amortizer.step()
                    amor_loss_val = total
                state.gather_count += 1
            if k % cfg.t_target == 0:
                for m in MODALITIES:
                    ema_update(state.targets[m], state.online[m], cfg.alpha)

            log_lam = {m: amortize_forward(state.targets[m].ema, emb[m])[0] for m in MODALITIES}
            median_err = _median_log_gap(log_lam, {m: pe[m].log_z_exact for m in MODALITIES})
            snapshot = {
                "step": state.global_step,
                "epoch": t,
                "tau": tau,
                "amor_loss": amor_loss_val,
                "median_abs_log_z_err": median_err,
            }
            try:
                raw = amortized_mle_loss(emb["a"], emb["b"], tau, log_lam["a"], log_lam["b"])
            except DomainError as exc:
                raise TrainingDivergence(str(exc), snapshot) from exc
            rescaled = temperature_rescale(raw, tau, rho)
            snapshot.update(stage2_loss_raw=raw.value, stage2_loss_rescaled=rescaled.value)
            _check_finite(raw.value, "stage-II loss", snapshot)
            if amor_loss_val is not None:
                _check_finite(amor_loss_val, "amortization loss", snapshot)

            state.encoders.zero_grad()
            state.temperature.block.zero_grad()
            encoder_backward(caches["a"], rescaled.grad_a)
            encoder_backward(caches["b"], rescaled.grad_b)
            state.temperature.accumulate_tau_grad(rescaled.tau_grad)
            state.opt_encoder.step()
            state.temperature.clamp()
            state.step_in_epoch = k

            if metrics is not None and _should_log(cfg, state.global_step, total_steps):
                metrics.emit(
                    _record(
                        state,
                        stage2_raw=raw.value,
                        stage2_rescaled=rescaled.value,
                        amor_loss=amor_loss_val,
                        tau=tau,
                        beta_t=beta_t,
                        rho=rho,
                        median_err=median_err,
                        wall_start=wall_start,
                    )
                )
    return state


def run_clip_baseline(
    cfg: TrainConfig,
    ds: PairedDataset,
    metrics: MetricsWriter | None = None,
    start_state: TrainState | None = None,
    max_steps: int | None = None,
) -> TrainState:
    """NCE baseline with in-batch candidates; gathers on every step."""
    cfg.validate()
    if cfg.method != "clip":
        raise ConfigError(f"run_clip_baseline requires method='clip', got {cfg.method!r}")
    train_ds, _ = split_eval(ds, cfg.eval_fraction, cfg.seed)
    if train_ds.n < cfg.batch_size:
        raise ConfigError("training split smaller than one batch")
    state = start_state if start_state is not None else init_train_state(cfg, ds)
    steps_per_epoch = train_ds.n // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    sched = cfg.rho_schedule()
    wall_start = time.perf_counter()

    for t in range(max(state.epoch, 1), cfg.epochs + 1):
        resuming_mid = t == state.epoch and state.step_in_epoch > 0
        if not resuming_mid:
            state.epoch = t
            state.step_in_epoch = 0
        skip = state.step_in_epoch
        rho = rho_at(t, cfg.epochs, sched)
        plan = make_batch_plan(train_ds.n, cfg.batch_size, cfg.seed, t)
        for k, idx in enumerate(plan.batches(), start=1):
            if k <= skip:
                continue
            if max_steps is not None and state.global_step >= max_steps:
                return state
            state.global_step += 1
            state.gather_count += 1
            tau = state.temperature.tau
            emb, caches = _embed(state, train_ds, idx, state.global_step)
            raw = nce_loss(emb["a"], emb["b"], tau)
            rescaled = temperature_rescale(raw, tau, rho)
            snapshot = {
                "step": state.global_step,
                "epoch": t,
                "tau": tau,
                "stage2_loss_raw": raw.value,
                "stage2_loss_rescaled": rescaled.value,
            }
            _check_finite(raw.value, "NCE loss", snapshot)

            state.encoders.zero_grad()
            state.temperature.block.zero_grad()
            encoder_backward(caches["a"], rescaled.grad_a)
            encoder_backward(caches["b"], rescaled.grad_b)
            state.temperature.accumulate_tau_grad(rescaled.tau_grad)
            state.opt_encoder.step()
            state.temperature.clamp()
            state.step_in_epoch = k

            if metrics is not None and _should_log(cfg, state.global_step, total_steps):
                metrics.emit(
                    _record(
                        state,
                        stage2_raw=raw.value,
                        stage2_rescaled=rescaled.value,
                        amor_loss=None,
                        tau=tau,
                        beta_t=None,
                        rho=rho,
                        median_err=None,
                        wall_start=wall_start,
                    )
                )
    return state


def run_training(
    cfg: TrainConfig,
    ds: PairedDataset,
    metrics: MetricsWriter | None = None,
    start_state: TrainState | None = None,
    max_steps: int | None = None,
) -> TrainState:
    if cfg.method == "amorlip":
        return run_amorlip(cfg, ds, metrics, start_state, max_steps)
    return run_clip_baseline(cfg, ds, metrics, start_state, max_steps)


# ---------------------------------------------------------------------------
# checkpoints (AMCK1)


def _optimizer_blocks(tag: str, opt: AdamW) -> list[tuple[str, Array]]:
    out: list[tuple[str, Array]] = []
    for b in opt.blocks:
        out.append((f"{tag}/m/{b.name}", opt.m[b.name]))
        out.append((f"{tag}/v/{b.name}", opt.v[b.name]))
    out.append((f"{tag}/t", np.array([[float(opt.t)]])))
    return out


def _scalar(value: float) -> Array:
    return np.array([[float(value)]])


def state_blocks(state: TrainState) -> list[tuple[str, Array]]:
    """Named 2-D float64 payloads, in a fixed order."""
    out: list[tuple[str, Array]] = [(b.name, b.value) for b in state.encoders.blocks()]
    out.append((state.temperature.block.name, state.temperature.block.value))
    if state.online is not None:
        for group in (
            [state.online[m] for m in MODALITIES],
            [state.targets[m].ema for m in MODALITIES],
            [state.targets[m].prev_epoch for m in MODALITIES],
        ):
            for amor in group:
                out.extend((b.name, b.value) for b in amor.blocks())
    out.extend(_optimizer_blocks("opt_enc", state.opt_encoder))
    if state.opt_amortizer is not None:
        out.extend(_optimizer_blocks("opt_amor", state.opt_amortizer))
    out.extend(
        [
            ("meta/epoch", _scalar(state.epoch)),
            ("meta/step_in_epoch", _scalar(state.step_in_epoch)),
            ("meta/global_step", _scalar(state.global_step)),
            ("meta/gather_count", _scalar(state.gather_count)),
            ("meta/seed", _scalar(state.config.seed)),
            ("meta/eval_fraction", _scalar(state.config.eval_fraction)),
            ("meta/method", _scalar(1.0 if state.config.method == "amorlip" else 0.0)),
            ("meta/tau_max", _scalar(state.config.tau_max)),
        ]
    )
    return out


def checkpoint_save(state: TrainState, path) -> None:
    blocks = state_blocks(state)
    parts = [CKPT_MAGIC, struct.pack("<I", len(blocks))]
    for name, value in blocks:
        raw = np.ascontiguousarray(value, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<II", raw.shape[0], raw.shape[1]))
        parts.append(raw.tobytes())
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def checkpoint_load_blocks(path) -> dict[str, Array]:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("bad magic, not an AMCK1 checkpoint", offset=0)
    off = len(CKPT_MAGIC)
    if len(blob) < off + 4:
        raise FormatError("truncated block count", offset=len(blob))
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    blocks: dict[str, Array] = {}
    for _ in range(count):
        if len(blob) < off + 4:
            raise FormatError("truncated name length", offset=off)
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + name_len + 8:
            raise FormatError("truncated block header", offset=off)
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = rows * cols * 8
        if len(blob) < off + nbytes:
            raise FormatError(f"truncated payload for block {name!r}", offset=off)
        blocks[name] = (
            np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off)
            .reshape(rows, cols)
            .copy()
        )
        off += nbytes
    if off != len(blob):
        raise FormatError("trailing bytes after final block", offset=off)
    return blocks


def _load_into(block_values: dict[str, Array], name: str, dest: Array) -> None:
    if name not in block_values:
        raise ContractError(f"checkpoint is missing block {name!r}")
    src = block_values[name]
    if src.shape != dest.shape:
        raise ContractError(
            f"block {name!r}: checkpoint shape {src.shape} != expected {dest.shape}"
        )
    dest[...] = src


def _load_optimizer(block_values: dict[str, Array], tag: str, opt: AdamW) -> None:
    for b in opt.blocks:
        _load_into(block_values, f"{tag}/m/{b.name}", opt.m[b.name])
        _load_into(block_values, f"{tag}/v/{b.name}", opt.v[b.name])
    if f"{tag}/t" not in block_values:
        raise ContractError(f"checkpoint is missing block '{tag}/t'")
    opt.t = int(block_values[f"{tag}/t"][0, 0])


def restore_train_state(cfg: TrainConfig, ds: PairedDataset, path) -> TrainState:
    """Rebuild a TrainState for resumption; cfg must match the saved run."""
    blocks = checkpoint_load_blocks(path)
    method = "amorlip" if blocks.get("meta/method", _scalar(1.0))[0, 0] == 1.0 else "clip"
    if method != cfg.method:
        raise ConfigError(f"checkpoint was written by method {method!r}, config says {cfg.method!r}")
    state = init_train_state(cfg, ds)
    for b in state.encoders.blocks():
        _load_into(blocks, b.name, b.value)
    _load_into(blocks, state.temperature.block.name, state.temperature.block.value)
    if state.online is not None:
        for m in MODALITIES:
            for b in state.online[m].blocks():
                _load_into(blocks, b.name, b.value)
            for b in state.targets[m].ema.blocks():
                _load_into(blocks, b.name, b.value)
            for b in state.targets[m].prev_epoch.blocks():
                _load_into(blocks, b.name, b.value)
    _load_optimizer(blocks, "opt_enc", state.opt_encoder)
    if state.opt_amortizer is not None:
        _load_optimizer(blocks, "opt_amor", state.opt_amortizer)

    def meta(name: str) -> int:
        if name not in blocks:
            raise ContractError(f"checkpoint is missing block {name!r}")
        return int(blocks[name][0, 0])

    state.epoch = meta("meta/epoch")
    state.step_in_epoch = meta("meta/step_in_epoch")
    state.global_step = meta("meta/global_step")
    state.gather_count = meta("meta/gather_count")
    return state


@dataclass
class EvalModel:
    """The read-only slice of a checkpoint needed for evaluation."""

    encoders: EncoderParams
    temperature: Temperature
    targets: dict[str, AmortizerParams] | None
    seed: int
    eval_fraction: float
    method: str


def _net_from_blocks(blocks: dict[str, Array], prefix: str) -> Mlp | None:
    arrays = []
    i = 0
    while f"{prefix}/w{i}" in blocks:
        arrays.append(blocks[f"{prefix}/w{i}"])
        if f"{prefix}/b{i}" not in blocks:
            raise ContractError(f"checkpoint is missing block '{prefix}/b{i}'")
        arrays.append(blocks[f"{prefix}/b{i}"])
        i += 1
    if not arrays:
        return None
    return Mlp.from_arrays(prefix, arrays)


def load_eval_model(path) -> EvalModel:
    """Rebuild encoders, temperature and target amortizers from a checkpoint
    alone; layer shapes are recovered from the stored blocks."""
    blocks = checkpoint_load_blocks(path)
    nets = {}
    for m in MODALITIES:
        net = _net_from_blocks(blocks, f"encoder_{m}")
        if net is None:
            raise ContractError(f"checkpoint has no encoder for modality {m!r}")
        nets[m] = net
    encoders = EncoderParams(nets=nets)
    if encoders.nets["a"].dims[-1] != encoders.nets["b"].dims[-1]:
        raise ContractError("encoder output dims disagree across modalities")
    if "temperature/log_tau" not in blocks:
        raise ContractError("checkpoint is missing block 'temperature/log_tau'")
    tau_max = float(blocks.get("meta/tau_max", _scalar(100.0))[0, 0])
    temperature = Temperature(init_tau=1.0, tau_max=tau_max)
    temperature.block.value[...] = blocks["temperature/log_tau"]
    targets = None
    target_nets = {m: _net_from_blocks(blocks, f"target_{m}") for m in MODALITIES}
    if all(net is not None for net in target_nets.values()):
        targets = {}
        for m in MODALITIES:
            net = target_nets[m]
            factor = net.dims[1] / net.dims[0]
            targets[m] = AmortizerParams(net=net, modality=m, dim_factor=factor)
    seed = int(blocks.get("meta/seed", _scalar(0.0))[0, 0])
    eval_fraction = float(blocks.get("meta/eval_fraction", _scalar(0.1))[0, 0])
    method = "amorlip" if blocks.get("meta/method", _scalar(1.0))[0, 0] == 1.0 else "clip"
    return EvalModel(
        encoders=encoders,
        temperature=temperature,
        targets=targets,
        seed=seed,
        eval_fraction=eval_fraction,
        method=method,
    )


# ---------------------------------------------------------------------------
# amortizer fidelity (frozen encoders)


def amortizer_fidelity_experiment(
    cfg: TrainConfig,
    ds: PairedDataset,
    pretrain_epochs: int = 2,
    invocations: int = 500,
    amortizer_lr: float = 0.12,
) -> dict:
    """How well can the lightweight amortizers represent the partition
    function of a fixed encoder?

    Freezes the encoders after a short NCE pretrain, embeds the held-out
    slice, computes its slice-level log partitions (the empirical marginal,
    exactly what partition_error measures), and fits fresh amortizers to
    them with the squared log-gap objective over seeded minibatches.

    Each amortization round performs t_lambda optimizer iterations, as in
    the full training loop. The output bias warm-starts at the first
    batch's target mean, and the step size decays on a cosine from a value
    large enough to carve the per-sample structure within the budget;
    batch-level partitions are not used as targets here because at this
    batch size the guaranteed diagonal term biases them upward relative to
    the slice-level marginal.
    """
    clip_cfg = dataclasses.replace(cfg, method="clip", epochs=pretrain_epochs)
    pre_state = run_clip_baseline(clip_cfg, ds)
    _, eval_ds = split_eval(ds, cfg.eval_fraction, cfg.seed)
    tau = pre_state.temperature.tau

    emb = {}
    for m in MODALITIES:
        batch = eval_ds.mod_a if m == "a" else eval_ds.mod_b
        emb[m], _ = encode(pre_state.encoders, batch.astype(np.float64), m)
    targets = {
        "a": exact_partition(emb["a"], emb["b"], tau, include_positive=True).log_z_exact,
        "b": exact_partition(emb["b"], emb["a"], tau, include_positive=True).log_z_exact,
    }

    online = {
        m: init_amortizer(cfg.embed_dim, cfg.f_d, m, (cfg.seed, FIDELITY_SALT, i))
        for i, m in enumerate(MODALITIES)
    }
    blocks = []
    for m in MODALITIES:
        blocks.extend(online[m].blocks())
    opt = AdamW(blocks, lr=amortizer_lr, weight_decay=0.0)

    total_steps = invocations * cfg.t_lambda
    done = 0
    epoch = 0
    loss = math.nan
    while done < total_steps:
        epoch += 1
        for idx in make_batch_plan(eval_ds.n, cfg.batch_size, cfg.seed, epoch).batches():
            if done >= total_steps:
                break
            if done == 0:
                for m in MODALITIES:
                    online[m].net.biases[-1].value[0, 0] = float(np.mean(targets[m][idx]))
            opt.lr = amortizer_lr * 0.5 * (1.0 + math.cos(math.pi * done / total_steps))
            loss = 0.0
            for m in MODALITIES:
                online[m].zero_grad()
            for m in MODALITIES:
                view = EmbeddingBatch(emb[m].data[idx], m)
                loss += loss_l2log(online[m], view, targets[m][idx])
            opt.step()
            done += 1

    from .evaluation import partition_error  # local import, avoids a cycle

    model = EvalModel(
        encoders=pre_state.encoders,
        temperature=pre_state.temperature,
        targets=online,
        seed=cfg.seed,
        eval_fraction=cfg.eval_fraction,
        method="amorlip",
    )
    median, mean = partition_error(model, eval_ds)
    return {
        "median_abs_log_z_err": median,
        "mean_abs_log_z_err": mean,
        "tau": tau,
        "optimizer_steps": done,
        "final_l2log_loss": loss,
    }
