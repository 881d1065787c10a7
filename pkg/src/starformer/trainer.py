"""Two-tower training, evaluation metrics and checkpoint persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .darem import ImportanceScores, MaskConfig, apply_mask, build_regional_mask, importance_from_attention
from .data import Dataset, Normalizer, batch_iterator
from .encoder import (ModelConfig, Params, SequenceBatch, classify_head, encoder_forward, init_params,
                      param_versions)
from .errors import ConfigError, ContractError, DataError, DivergenceError, FormatError
from .losses import (LatentPair, LossConfig, batchwise_loss, classwise_loss, cross_entropy, fused_cl_loss,
                     pooled_embedding, total_loss)
from .tensor import Parameter, Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.contrastive and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when contrastive learning is enabled")

    @property
    def contrastive(self) -> bool:
        return self.loss.lambda_cl > 0 and self.mask.strategy != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        subs = {"model": ModelConfig, "mask": MaskConfig, "loss": LossConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        for key, kind in subs.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in fields(kind)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = kind(**d[key])
        return cls(**d)


class Adam:
    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.assign(p.data - update.astype(p.dtype))


@dataclass
class TrainState:
    config: TrainConfig
    params: Params
    optimizer: Adam
    step: int = 0
    best_params: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None
    best_val_accuracy: float = -1.0
    normalizer: Normalizer | None = None
    time_range: tuple[float, float] | None = None  # timestamp scaling of the training data

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        params = init_params(config.model, config.seed)
        opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        return cls(config, params, opt)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            self.params[k].assign(arr)

    def best_or_current(self) -> dict[str, np.ndarray]:
        return self.best_params if self.best_params is not None else self.snapshot()


@dataclass
class StepReport:
    step: int
    l_ce: float
    l_bw: float
    l_cw: float
    l_cl: float
    l_total: float
    mask_fraction: float = 0.0
    grad_norm: float = 0.0
    versions_unmasked: tuple = ()
    versions_masked: tuple = ()


@dataclass
class TowerOutputs:
    """Everything one two-tower forward produces; used by train_step and tests."""

    Z: T.Tensor
    logits: T.Tensor
    attention: object
    l_ce: T.Tensor
    Z_masked: T.Tensor | None = None
    mask: object = None
    l_bw: T.Tensor | None = None
    l_cw: T.Tensor | None = None
    l_cl: T.Tensor | None = None
    l_total: T.Tensor | None = None
    versions: tuple = ()
    versions_masked: tuple = ()


def _step_seed(config: TrainConfig, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([config.seed, step, stream]).generate_state(1)[0])


def two_tower_forward(batch: SequenceBatch, params: Params, config: TrainConfig, *, step: int = 0,
                      train: bool = True) -> TowerOutputs:
    """Unmasked pass, regional mask from its attention, masked pass with the same params.

    Both towers draw dropout from the same per-step stream, so with an empty
    mask the two towers compute bit-identical hidden states.
    """
    mc = config.model
    dropout_seed = _step_seed(config, step, 0)
    versions = param_versions(params)
    Z, attn = encoder_forward(batch, params, mc, train=train, rng=np.random.default_rng(dropout_seed))
    logits = classify_head(Z, params, mc)
    l_ce = cross_entropy(logits, batch.labels)
    out = TowerOutputs(Z, logits, attn, l_ce, versions=versions)
    if not config.contrastive:
        out.l_total = total_loss(l_ce, None, replace(config.loss, lambda_cl=0.0))
        return out
    if config.mask.strategy == "darem":
        scores = importance_from_attention(attn, batch.valid)
    else:
        scores = _uniform_scores(batch)
    mask = build_regional_mask(scores, config.mask, _step_seed(config, step, 1))
    out.versions_masked = param_versions(params)
    Zm, _ = encoder_forward(apply_mask(batch, mask), params, mc, train=train,
                            rng=np.random.default_rng(dropout_seed))
    pair = LatentPair(pooled_embedding(Z, batch.valid), pooled_embedding(Zm, batch.valid), batch.labels)
    l_bw = batchwise_loss(pair, config.loss)
    l_cw = classwise_loss(pair, config.loss)
    l_cl = fused_cl_loss(l_bw, l_cw, config.loss)
    out.Z_masked, out.mask = Zm, mask
    out.l_bw, out.l_cw, out.l_cl = l_bw, l_cw, l_cl
    out.l_total = total_loss(l_ce, l_cl, config.loss)
    return out


def _uniform_scores(batch: SequenceBatch):
    sigma = batch.valid / batch.valid.sum(axis=1, keepdims=True)
    return ImportanceScores(sigma, batch.valid)


def _scalar(x) -> float:
    return 0.0 if x is None else x.item()


def train_step(batch: SequenceBatch, state: TrainState) -> StepReport:
    cfg = state.config
    params = state.params
    for p in params.values():
        p.zero_grad()
    with T.precision(cfg.model.np_dtype), Tape() as tape:
        out = two_tower_forward(batch, params, cfg, step=state.step, train=True)
    loss = out.l_total.item()
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at step {state.step}")
    if out.versions_masked and out.versions_masked != out.versions:
        raise ContractError("towers read different parameter versions")
    tape.backward(out.l_total)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite gradient norm at step {state.step}")
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        factor = cfg.grad_clip / (norm + 1e-12)
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    state.optimizer.step(params, grads)
    for p in params.values():
        p.zero_grad()
    report = StepReport(
        step=state.step, l_ce=out.l_ce.item(), l_bw=_scalar(out.l_bw), l_cw=_scalar(out.l_cw),
        l_cl=_scalar(out.l_cl), l_total=loss,
        mask_fraction=float(out.mask.masked.sum() / batch.valid.sum()) if out.mask is not None else 0.0,
        grad_norm=norm, versions_unmasked=out.versions, versions_masked=out.versions_masked,
    )
    state.step += 1
    return report


# metrics -------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    f_beta: float  # beta = 0.5
    confusion: np.ndarray  # [true, pred]
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "f0.5": self.f_beta, "confusion": self.confusion.tolist()}


def _safe_div(a: float, b: float) -> float:
    return float(a / b) if b > 0 else 0.0


def f_beta_score(p: float, r: float, beta: float) -> float:
    b2 = beta * beta
    return _safe_div((1 + b2) * p * r, b2 * p + r)


def metrics_from_confusion(confusion: np.ndarray, beta: float = 0.5) -> Metrics:
    """Macro-averaged scores; a class with an empty denominator scores 0."""
    cm = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    prec = [_safe_div(tp[c], pred[c]) for c in range(len(cm))]
    rec = [_safe_div(tp[c], true[c]) for c in range(len(cm))]
    f1 = [f_beta_score(p, r, 1.0) for p, r in zip(prec, rec)]
    fb = [f_beta_score(p, r, beta) for p, r in zip(prec, rec)]
    return Metrics(
        accuracy=_safe_div(tp.sum(), cm.sum()), precision=float(np.mean(prec)), recall=float(np.mean(rec)),
        f1=float(np.mean(f1)), f_beta=float(np.mean(fb)), confusion=cm,
        per_class={"precision": prec, "recall": rec, "f1": f1, "f_beta": fb},
    )


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def predict_logits(split: Dataset, params: Params, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.precision(config.np_dtype):
        for batch in batch_iterator(split, batch_size, dtype=config.np_dtype):
            Z, _ = encoder_forward(batch, params, config, train=False)
            out.append(classify_head(Z, params, config).data)
    return np.concatenate(out, axis=0)


def evaluate(split: Dataset, state: TrainState, *, use_best: bool = False, batch_size: int = 64) -> Metrics:
    params = state.params
    if use_best and state.best_params is not None:
        params = {k: Parameter(v, dtype=v.dtype, name=k) for k, v in state.best_params.items()}
    logits = predict_logits(split, params, state.config.model, batch_size)
    if logits.shape[1] == 1:
        pred = (logits[:, 0] > 0).astype(np.int64)
    else:
        pred = logits.argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(split.labels, pred, state.config.model.num_classes))


# training loop ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1: float
    val_f05: float


def train_loop(train: Dataset, val: Dataset | None, config: TrainConfig, *, state: TrainState | None = None,
               callback=None) -> tuple[TrainState, list[EpochRecord]]:
    """Seeded epochs over ``train``; keeps the best-validation-accuracy parameters.

    Without a validation split the best checkpoint tracks the lowest training loss.
    """
    if train is None or len(train) == 0:
        raise DataError("training split is empty")
    if val is not None and len(val) == 0:
        raise DataError("validation split is empty")
    state = state or TrainState.create(config)
    history: list[EpochRecord] = []
    dtype = config.model.np_dtype
    for epoch in range(1, config.epochs + 1):
        losses, sizes = [], []
        shuffle_seed = _step_seed(config, epoch, 2)
        for batch in batch_iterator(train, config.batch_size, shuffle_seed, dtype=dtype):
            if config.contrastive and batch.size < 2:
                log.debug("skipping a batch of size %d: contrastive terms need negatives", batch.size)
                continue
            report = train_step(batch, state)
            losses.append(report.l_total)
            sizes.append(batch.size)
        train_loss = float(np.average(losses, weights=sizes)) if losses else float("nan")
        if val is not None:
            m = evaluate(val, state)
            rec = EpochRecord(epoch, train_loss, m.accuracy, m.f1, m.f_beta)
            score = m.accuracy
        else:
            rec = EpochRecord(epoch, train_loss, float("nan"), float("nan"), float("nan"))
            score = -train_loss
        if state.best_params is None or score > state.best_val_accuracy:
            state.best_val_accuracy = score
            state.best_params = state.snapshot()
            state.best_epoch = epoch
        history.append(rec)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, rec.val_accuracy)
        if callback is not None:
            callback(state, rec)
    return state, history


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_accuracy", "val_f1", "val_f0.5"])
    for r in history:
        w.writerow([r.epoch, *(repr(float(v)) if v is not None else "" for v in (r.train_loss, r.val_accuracy, r.val_f1, r.val_f05))])
    return buf.getvalue()


# checkpoint container ----------------------------------------------------------
#
#   b"STRF" | u32 version | 32-byte sha256 of the model config
#   | u32 n + n bytes of run-config JSON | u32 tensor count
#   | per tensor: u16 n + name | u32 rank | rank x u64 extents | float64 LE values

MAGIC = b"STRF"
FORMAT_VERSION = 1


def checkpoint_bytes(arrays: dict[str, np.ndarray], run_config: dict, model_config: ModelConfig) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(model_config.digest())
    blob = json.dumps(run_config, sort_keys=True).encode()
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(state: TrainState, path, *, use_best: bool = True, extra_config: dict | None = None) -> None:
    arrays = dict(state.best_or_current() if use_best else state.snapshot())
    if state.normalizer is not None:
        arrays["data.norm_mean"] = state.normalizer.mean
        arrays["data.norm_std"] = state.normalizer.std
    if state.time_range is not None:
        arrays["data.time_range"] = np.asarray(state.time_range, dtype=np.float64)
    run_config = {"train": state.config.to_dict(), **(extra_config or {})}
    blob = checkpoint_bytes(arrays, run_config, state.config.model)
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> tuple[bytes, dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    try:
        run_config = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the last tensor")
    return digest, run_config, arrays


def load_checkpoint(path, model_config: ModelConfig | None = None) -> TrainState:
    """Read a checkpoint into a fresh state; the params are the saved ones.

    With ``model_config`` given, every tensor is checked against the shapes
    that config implies, and the config digests must agree.
    """
    with open(path, "rb") as fh:
        digest, run_config, arrays = parse_checkpoint(fh.read())
    try:
        saved_cfg = TrainConfig.from_dict(run_config["train"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint config is incomplete: {exc}") from None
    if saved_cfg.model.digest() != digest:
        raise FormatError("checkpoint config digest does not match its embedded config")
    cfg = saved_cfg if model_config is None else replace(saved_cfg, model=model_config)
    state = TrainState.create(cfg)
    for name, p in state.params.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint lacks tensor {name!r}")
        if arrays[name].shape != p.shape:
            raise ConfigError(f"tensor {name!r} has shape {arrays[name].shape}, config expects {p.shape}")
    extra = set(arrays) - set(state.params) - {"data.norm_mean", "data.norm_std", "data.time_range"}
    if extra:
        raise ConfigError(f"checkpoint has tensors the config does not define: {sorted(extra)}")
    if model_config is not None and model_config.digest() != digest:
        raise ConfigError("checkpoint was written for a different model config (digest mismatch)")
    for name, p in state.params.items():
        p.assign(arrays[name])
    if "data.norm_mean" in arrays:
        state.normalizer = Normalizer(arrays["data.norm_mean"], arrays["data.norm_std"])
    if "data.time_range" in arrays:
        lo, hi = arrays["data.time_range"].tolist()
        state.time_range = (lo, hi)
    state.best_params = None
    return state


def load_run_config(path) -> dict:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())[1]
