"""Held-out evaluation: cross-modal retrieval, zero-shot classification by
class prototype, and amortizer-quality statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .amortization import AmortizerParams, TargetAmortizer, amortize_forward, exact_partition
from .data import PairedDataset
from .encoders import MODALITIES, EmbeddingBatch, encode
from .errors import ConfigError, ContractError
from .numerics import Array


@dataclass
class EvalReport:
    """Retrieval, zero-shot and amortizer statistics for one model/split."""

    recall_at_1_ab: float
    recall_at_1_ba: float
    recall_at_5_ab: float
    recall_at_5_ba: float
    zero_shot_accuracy: float
    median_abs_log_z_err: float | None
    mean_abs_log_z_err: float | None
    n_eval: int

    def to_json_dict(self) -> dict:
        out = {
            "recall_at_1": {"a_to_b": self.recall_at_1_ab, "b_to_a": self.recall_at_1_ba},
            "recall_at_5": {"a_to_b": self.recall_at_5_ab, "b_to_a": self.recall_at_5_ba},
            "zero_shot_accuracy": self.zero_shot_accuracy,
            "n_eval": self.n_eval,
        }
        if self.median_abs_log_z_err is not None:
            out["median_abs_log_z_err"] = self.median_abs_log_z_err
            out["mean_abs_log_z_err"] = self.mean_abs_log_z_err
        return out


def _ranks_of_partners(scores: Array) -> Array:
    """Rank of the diagonal entry within each row, ties broken toward lower
    column index (a tie at a lower index outranks the partner)."""
    m = scores.shape[0]
    diag = np.diag(scores)
    better = (scores > diag[:, None]).sum(axis=1)
    cols = np.arange(m)[None, :]
    rows = np.arange(m)[:, None]
    tie_lower = ((scores == diag[:, None]) & (cols < rows)).sum(axis=1)
    return 1 + better + tie_lower


def recall_at_k(emb_a: EmbeddingBatch, emb_b: EmbeddingBatch, k: int) -> tuple[float, float]:
    """Fraction of queries whose true partner ranks in the top k, for both
    retrieval directions (a queries b, then b queries a)."""
    if emb_a.n != emb_b.n or emb_a.dim != emb_b.dim:
        raise ContractError("embedding batches must share n and dim")
    if k < 1 or k > emb_a.n:
        raise ConfigError(f"k must lie in [1, {emb_a.n}], got {k}")
    scores = emb_a.data @ emb_b.data.T
    r_ab = float(np.mean(_ranks_of_partners(scores) <= k))
    r_ba = float(np.mean(_ranks_of_partners(scores.T) <= k))
    return r_ab, r_ba


def class_prototypes(emb: EmbeddingBatch, labels: Array, num_classes: int) -> Array:
    """Unit-norm per-class mean embeddings. A class absent from the slice
    keeps a zero prototype (it can never be a query's own class)."""
    labels = np.asarray(labels)
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if np.any(labels >= num_classes):
        raise ContractError("label out of range")
    protos = np.zeros((num_classes, emb.dim))
    for c in range(num_classes):
        members = emb.data[labels == c]
        if members.shape[0]:
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                protos[c] = mean / norm
    return protos


def zero_shot_accuracy(sample_emb: EmbeddingBatch, prototype_emb: Array, labels: Array) -> float:
    """Fraction of samples whose highest-similarity prototype matches the
    label; ties resolve to the lower class id."""
    protos = np.asarray(prototype_emb, dtype=np.float64)
    labels = np.asarray(labels)
    if protos.ndim != 2 or protos.shape[0] < 2:
        raise ConfigError("need at least 2 prototype rows")
    if protos.shape[1] != sample_emb.dim:
        raise ContractError("prototype dim does not match embeddings")
    if labels.shape[0] != sample_emb.n:
        raise ContractError("labels length does not match embeddings")
    if np.any(labels >= protos.shape[0]):
        raise ContractError("label out of range")
    pred = np.argmax(sample_emb.data @ protos.T, axis=1)
    return float(np.mean(pred == labels))


def partition_gap_stats(log_lambda: Array, log_z: Array) -> tuple[float, float]:
    """(median, mean) of |log lambda - log Z| over pooled samples."""
    gaps = np.abs(np.asarray(log_lambda, dtype=np.float64) - np.asarray(log_z, dtype=np.float64))
    return float(np.median(gaps)), float(np.mean(gaps))


def _target_net(model, modality: str) -> AmortizerParams:
    tgt = model.targets[modality]
    if isinstance(tgt, TargetAmortizer):
        return tgt.ema
    return tgt


def _embed_slice(model, ds_slice: PairedDataset) -> dict[str, EmbeddingBatch]:
    emb = {}
    for m in MODALITIES:
        batch = ds_slice.mod_a if m == "a" else ds_slice.mod_b
        emb[m], _ = encode(model.encoders, batch.astype(np.float64), m)
    return emb


def partition_error(model, ds_slice: PairedDataset) -> tuple[float, float]:
    """(median, mean) absolute gap between the target amortizer's log
    predictions and the exact slice-level log partitions, pooled over both
    modalities. The slice itself serves as the empirical marginal."""
    if getattr(model, "targets", None) is None:
        raise ContractError("model has no amortizers; partition error is undefined")
    emb = _embed_slice(model, ds_slice)
    tau = model.temperature.tau
    gaps = []
    for m, mp in (("a", "b"), ("b", "a")):
        pe = exact_partition(emb[m], emb[mp], tau, include_positive=True)
        log_lam, _ = amortize_forward(_target_net(model, m), emb[m])
        gaps.append(np.abs(log_lam - pe.log_z_exact))
    pooled = np.concatenate(gaps)
    return float(np.median(pooled)), float(np.mean(pooled))


def evaluate_model(model, eval_ds: PairedDataset) -> EvalReport:
    """Full evaluation on a held-out slice: retrieval in both directions,
    zero-shot accuracy of modality-a samples against modality-b class
    prototypes, and amortizer statistics when the model carries amortizers."""
    emb = _embed_slice(model, eval_ds)
    r1_ab, r1_ba = recall_at_k(emb["a"], emb["b"], 1)
    k5 = min(5, eval_ds.n)
    r5_ab, r5_ba = recall_at_k(emb["a"], emb["b"], k5)
    protos = class_prototypes(emb["b"], eval_ds.labels, eval_ds.num_classes)
    acc = zero_shot_accuracy(emb["a"], protos, eval_ds.labels)
    median = mean = None
    if getattr(model, "targets", None) is not None:
        median, mean = partition_error(model, eval_ds)
    return EvalReport(
        recall_at_1_ab=r1_ab,
        recall_at_1_ba=r1_ba,
        recall_at_5_ab=r5_ab,
        recall_at_5_ba=r5_ba,
        zero_shot_accuracy=acc,
        median_abs_log_z_err=median,
        mean_abs_log_z_err=mean,
        n_eval=eval_ds.n,
    )
