"""Training objectives, all expressed through :mod:`starformer.tensor`.

Contrastive anchors are the pooled unmasked embeddings ``u``; positives and
negatives are drawn from the pooled masked embeddings ``v``.  Denominators
follow the indicator sums literally, so the contrastive terms can go negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    lambda_cl: float = 1.0
    lambda_fuse: float = 0.5
    eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError("loss.tau must be > 0")
        if self.lambda_cl < 0:
            raise ConfigError("loss.lambda_cl must be >= 0")
        if not 0.0 <= self.lambda_fuse <= 1.0:
            raise ConfigError("loss.lambda_fuse must lie in [0, 1]")
        if not self.eps > 0:
            raise ConfigError("loss.eps must be > 0")


@dataclass
class LatentPair:
    u: Tensor  # [B, F] pooled unmasked
    v: Tensor  # [B, F] pooled masked
    labels: np.ndarray


def pooled_embedding(Z: Tensor, valid: np.ndarray) -> Tensor:
    """Mean hidden state over valid timesteps; the CLS slot (index 0) is skipped."""
    valid = np.asarray(valid, dtype=bool)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("pooling needs at least one valid timestep per sample")
    if Z.shape[1] != valid.shape[1] + 1:
        raise ContractError(f"hidden states {Z.shape} do not match valid mask {valid.shape} plus CLS")
    weights = (valid / counts[:, None]).astype(Z.dtype)[:, None, :]  # [B, 1, N]
    return T.reshape(Tensor._wrap(weights) @ Z[:, 1:, :], (Z.shape[0], Z.shape[2]))


def _unit_rows(x: Tensor, eps: float) -> Tensor:
    norms = T.clamp_min(T.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    return x / norms


def cosine_sim(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    return (_unit_rows(a, eps) * _unit_rows(b, eps)).sum(axis=-1)


def similarity_matrix(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """``S[i, k] = sim(u_i, v_k)``."""
    return _unit_rows(u, eps) @ _unit_rows(v, eps).T


def _check_pair(pair: LatentPair) -> int:
    B = pair.u.shape[0]
    if B < 2:
        raise ContractError("contrastive losses need a batch of at least 2")
    if pair.v.shape != pair.u.shape:
        raise ContractError(f"view shapes differ: {pair.u.shape} vs {pair.v.shape}")
    return B


def batchwise_terms(pair: LatentPair, cfg: LossConfig) -> Tensor:
    """Per-anchor ``-log(exp(S_ii/tau) / sum_{k != i} exp(S_ik/tau))``."""
    B = _check_pair(pair)
    logits = T.scale(similarity_matrix(pair.u, pair.v, cfg.eps), 1.0 / cfg.tau)
    eye = np.eye(B, dtype=bool)
    positive = (logits * Tensor._wrap(eye.astype(logits.dtype))).sum(axis=1)
    others = T.where_const(~eye, T.exp(logits), 0.0).sum(axis=1)
    return T.log(others) - positive


def batchwise_loss(pair: LatentPair, cfg: LossConfig) -> Tensor:
    return batchwise_terms(pair, cfg).mean()


def classwise_terms(pair: LatentPair, cfg: LossConfig) -> tuple[Tensor, np.ndarray]:
    """Per-anchor class-wise terms and the mask of anchors that contribute.

    Anchors with no different-class sample in the batch get 0 and are dropped
    from the mean.
    """
    _check_pair(pair)
    labels = np.asarray(pair.labels)
    same = labels[:, None] == labels[None, :]
    contributes = (~same).any(axis=1)
    logits = T.scale(similarity_matrix(pair.u, pair.v, cfg.eps), 1.0 / cfg.tau)
    e = T.exp(logits)
    num = T.where_const(same, e, 0.0).sum(axis=1)
    # a filler of 1 keeps log finite on non-contributing rows; they are zeroed below
    den = T.where_const(~same, e, 0.0).sum(axis=1) + Tensor._wrap((~contributes).astype(e.dtype))
    terms = T.log(den) - T.log(num)
    return T.where_const(contributes, terms, 0.0), contributes


def classwise_loss(pair: LatentPair, cfg: LossConfig) -> Tensor:
    terms, contributes = classwise_terms(pair, cfg)
    n = int(contributes.sum())
    if n == 0:
        return T.scale(terms.sum(), 0.0)
    return T.scale(terms.sum(), 1.0 / n)


def fused_cl_loss(l_bw, l_cw, cfg: LossConfig):
    return cfg.lambda_fuse * l_bw + (1.0 - cfg.lambda_fuse) * l_cw


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood.  A single-column ``logits`` means BCE."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DataError(f"expected {B} labels, got shape {labels.shape}")
    if C == 1:
        if np.any((labels < 0) | (labels > 1)):
            raise DataError("binary labels must be 0 or 1")
        y = Tensor._wrap(labels.astype(logits.dtype)[:, None])
        return (T.softplus(logits) - logits * y).mean()
    if np.any((labels < 0) | (labels >= C)):
        raise DataError(f"labels must lie in [0, {C})")
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    return -(T.log_softmax_lastdim(logits) * Tensor._wrap(onehot)).sum(axis=1).mean()


def total_loss(l_ce, l_cl, cfg: LossConfig):
    if cfg.lambda_cl == 0:
        return l_ce
    return l_ce + cfg.lambda_cl * l_cl


def predict_proba(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1] == 1:
        p = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return np.stack([1.0 - p, p], axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
