"""Encoder-only transformer with a prepended classification token.

Both towers of the model call :func:`encoder_forward` with the same parameter
dict; the masked tower simply receives a batch whose masked rows were zeroed.
Layers are post-norm: attention, residual + layer norm, feed-forward,
residual + layer norm.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    ff_dim: int | None = None  # defaults to 4 * model_dim
    num_classes: int = 2
    input_dim: int = 1
    max_len: int = 512
    dropout_rate: float = 0.1
    activation: str = "gelu"
    head_hidden: int | None = None  # defaults to model_dim
    binary_head: bool = False  # one logit + BCE when num_classes == 2
    dtype: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.model_dim)
        if self.head_hidden is None:
            object.__setattr__(self, "head_hidden", self.model_dim)
        self.validate()

    def validate(self) -> None:
        for name in ("model_dim", "num_heads", "ff_dim", "input_dim", "max_len", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.num_layers < 0:
            raise ConfigError("model.num_layers must be >= 0")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model.num_heads={self.num_heads} does not divide model_dim={self.model_dim}")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"model.activation must be relu or gelu, got {self.activation!r}")
        if self.binary_head and self.num_classes != 2:
            raise ConfigError("model.binary_head requires num_classes == 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def num_outputs(self) -> int:
        return 1 if self.binary_head else self.num_classes

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class SequenceBatch:
    """Padded mini-batch, batch-major.  Padding sits at the tail of each row."""

    values: np.ndarray  # [B, N, D]
    valid: np.ndarray  # [B, N] bool
    lengths: np.ndarray  # [B]
    labels: np.ndarray  # [B]
    ids: list = field(default_factory=list)

    def __post_init__(self):
        B, N = self.valid.shape
        if self.values.shape[:2] != (B, N):
            raise ShapeError(f"values {self.values.shape} do not match valid {self.valid.shape}")
        if self.lengths.shape != (B,) or self.labels.shape != (B,):
            raise ShapeError("lengths and labels must have one entry per sample")
        if np.any(self.lengths < 1) or np.any(self.lengths > N):
            raise ContractError("each length must lie in [1, N]")
        if not np.array_equal(self.valid, np.arange(N)[None, :] < self.lengths[:, None]):
            raise ContractError("valid mask must be true exactly on the first lengths[b] steps")

    @property
    def size(self) -> int:
        return self.valid.shape[0]

    @classmethod
    def from_sequences(cls, seqs, labels, ids=None, pad_to: int | None = None) -> "SequenceBatch":
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        N = int(pad_to or lengths.max())
        D = np.asarray(seqs[0]).shape[1]
        values = np.zeros((len(seqs), N, D))
        for b, s in enumerate(seqs):
            values[b, : len(s)] = s
        valid = np.arange(N)[None, :] < lengths[:, None]
        return cls(values, valid, lengths, np.asarray(labels, dtype=np.int64),
                   list(ids) if ids is not None else list(range(len(seqs))))


@dataclass
class AttentionStack:
    """Head-averaged attention per layer, [L, B, N+1, N+1], CLS at index 0."""

    weights: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]


Params = dict[str, Parameter]


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    F, D = config.model_dim, config.input_dim
    params: Params = {}

    def dense(name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.weight"] = Parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype=dtype,
                                             name=f"{name}.weight")
        params[f"{name}.bias"] = Parameter(np.zeros(fan_out), dtype=dtype, name=f"{name}.bias")

    def norm(name):
        params[f"{name}.gain"] = Parameter(np.ones(F), dtype=dtype, name=f"{name}.gain")
        params[f"{name}.bias"] = Parameter(np.zeros(F), dtype=dtype, name=f"{name}.bias")

    params["cls"] = Parameter(rng.normal(0.0, 0.02, F), dtype=dtype, name="cls")
    dense("input", D, F)
    for i in range(config.num_layers):
        for proj in ("query", "key", "value", "out"):
            dense(f"layers.{i}.attn.{proj}", F, F)
        norm(f"layers.{i}.norm1")
        dense(f"layers.{i}.ff1", F, config.ff_dim)
        dense(f"layers.{i}.ff2", config.ff_dim, F)
        norm(f"layers.{i}.norm2")
    dense("head.hidden", F, config.head_hidden)
    dense("head.out", config.head_hidden, config.num_outputs)
    return params


def param_versions(params: Params) -> tuple[int, ...]:
    return tuple(p.version for p in params.values())


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/dim)), pe[p, 2i+1] = cos(same)."""
    pos = np.arange(length)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe


_PE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _positional(length: int, dim: int, dtype) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).name)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = sinusoidal_encoding(length, dim).astype(dtype)
    return _PE_CACHE[key]


def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _activate(x: Tensor, config: ModelConfig) -> Tensor:
    return T.relu(x) if config.activation == "relu" else T.gelu(x)


def token_mask(batch: SequenceBatch) -> np.ndarray:
    """Validity over the N+1 tokens; CLS is always valid."""
    B = batch.size
    return np.concatenate([np.ones((B, 1), dtype=bool), batch.valid], axis=1)


def embed_inputs(batch: SequenceBatch, params: Params, config: ModelConfig) -> Tensor:
    B, N, D = batch.values.shape
    if D != config.input_dim:
        raise ShapeError(f"batch feature dim {D} does not match model.input_dim={config.input_dim}")
    if N > config.max_len:
        raise ShapeError(f"sequence length {N} exceeds model.max_len={config.max_len}")
    F = config.model_dim
    dtype = config.np_dtype
    x = Tensor(batch.values, dtype=dtype)
    steps = _linear(x, params, "input") + Tensor._wrap(_positional(N, F, dtype))
    cls = T.broadcast_to(T.reshape(params["cls"], (1, 1, F)), (B, 1, F))
    return T.concat([cls, steps], axis=1)


def attention_mask(valid_tokens: np.ndarray) -> np.ndarray:
    """[B, T, T] key mask.  Padded queries may only see CLS."""
    keys = valid_tokens[:, None, :]
    cls_only = np.zeros_like(valid_tokens)
    cls_only[:, 0] = True
    rows = np.where(valid_tokens[:, :, None], keys, cls_only[:, None, :])
    return rows


def multi_head_attention(h: Tensor, valid_keys: np.ndarray, params: Params, config: ModelConfig,
                         prefix: str = "layers.0.attn") -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over valid keys.

    Returns the projected output and the head-averaged attention [B, T, T]
    (a plain array: it never carries gradient).
    """
    B, Tn, F = h.shape
    H, dh = config.num_heads, config.head_dim

    def heads(name):
        return T.transpose(T.reshape(_linear(h, params, f"{prefix}.{name}"), (B, Tn, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = T.scale(q @ k.swapaxes(-1, -2), 1.0 / math.sqrt(dh))
    mask = attention_mask(valid_keys)[:, None, :, :]
    weights = T.softmax_lastdim(scores, mask)
    ctx = T.reshape(T.transpose(weights @ v, (0, 2, 1, 3)), (B, Tn, F))
    return _linear(ctx, params, f"{prefix}.out"), weights.data.mean(axis=1)


def encoder_forward(batch: SequenceBatch, params: Params, config: ModelConfig, *, train: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, AttentionStack]:
    h = embed_inputs(batch, params, config)
    valid = token_mask(batch)
    p = config.dropout_rate
    stack = []
    for i in range(config.num_layers):
        pre = f"layers.{i}"
        attn_out, attn = multi_head_attention(h, valid, params, config, f"{pre}.attn")
        stack.append(attn)
        h = T.layer_norm(h + T.dropout(attn_out, p, rng, train),
                         params[f"{pre}.norm1.gain"], params[f"{pre}.norm1.bias"], config.ln_eps)
        ff = _linear(_activate(_linear(h, params, f"{pre}.ff1"), config), params, f"{pre}.ff2")
        h = T.layer_norm(h + T.dropout(ff, p, rng, train),
                         params[f"{pre}.norm2.gain"], params[f"{pre}.norm2.bias"], config.ln_eps)
    Tn = h.shape[1]
    weights = np.stack(stack) if stack else np.zeros((0, batch.size, Tn, Tn), dtype=config.np_dtype)
    return h, AttentionStack(weights)


def classify_head(Z: Tensor, params: Params, config: ModelConfig) -> Tensor:
    """MLP on the CLS state only; returns logits [B, C] (or [B, 1] with a binary head)."""
    cls = Z[:, 0, :]
    hidden = _activate(_linear(cls, params, "head.hidden"), config)
    return _linear(hidden, params, "head.out")
