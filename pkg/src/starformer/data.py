"""Datasets: JSONL I/O, synthetic motif generation, splitting and batching.

JSONL layout, one JSON object per line::

    {"meta": {"name": "toy", "num_classes": 3}}       # optional first line
    {"id": "s0", "label": 1, "x": [[0.1, 0.2], ...], "t": [0.0, 0.4, ...]}

``t`` is optional.  When a dataset carries timestamps they are min-max scaled
over the whole dataset and appended to ``x`` as a final feature channel.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .encoder import SequenceBatch
from .errors import ConfigError, DataError, ParseError, StratificationError


@dataclass
class SequenceSample:
    id: str
    label: int
    x: np.ndarray  # [n, D_eff]
    t: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    samples: list[SequenceSample]
    num_classes: int
    feature_dim: int  # effective: includes the time channel when present
    name: str = "dataset"
    time_channel: bool = False
    time_range: tuple[float, float] | None = None  # (lo, hi) used to scale t

    def __post_init__(self):
        if not self.samples:
            raise DataError(f"dataset {self.name!r} is empty")
        for s in self.samples:
            if s.x.ndim != 2 or s.x.shape[1] != self.feature_dim:
                raise DataError(f"sample {s.id!r} has shape {s.x.shape}, expected (n, {self.feature_dim})")
            if not 0 <= s.label < self.num_classes:
                raise DataError(f"sample {s.id!r} label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def raw_dim(self) -> int:
        return self.feature_dim - int(self.time_channel)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices], name=name or self.name)


def _records_to_dataset(records: list[tuple[int, dict]], num_classes: int | None, name: str) -> Dataset:
    samples = []
    has_t = None
    for lineno, rec in records:
        try:
            sid, label, x = rec["id"], rec["label"], rec["x"]
        except KeyError as exc:
            raise ParseError(f"line {lineno}: missing field {exc.args[0]!r}") from None
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError(f"line {lineno}: x must be a non-empty [n][D] array")
        if not np.all(np.isfinite(x)):
            raise DataError(f"line {lineno}: x contains NaN or Inf")
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise DataError(f"line {lineno}: label must be a non-negative integer")
        t = rec.get("t")
        if has_t is None:
            has_t = t is not None
        elif has_t != (t is not None):
            raise DataError(f"line {lineno}: timestamps must be present on all records or none")
        if t is not None:
            t = np.asarray(t, dtype=np.float64)
            if t.shape != (x.shape[0],):
                raise DataError(f"line {lineno}: t has {t.size} entries for {x.shape[0]} steps")
            if not np.all(np.isfinite(t)):
                raise DataError(f"line {lineno}: t contains NaN or Inf")
            if np.any(np.diff(t) <= 0):
                raise DataError(f"line {lineno}: timestamps are not strictly increasing")
        samples.append((lineno, SequenceSample(str(sid), label, x, t)))
    if not samples:
        raise DataError(f"{name}: no records")
    dims = {s.x.shape[1] for _, s in samples}
    if len(dims) > 1:
        lineno = next(ln for ln, s in samples if s.x.shape[1] != samples[0][1].x.shape[1])
        raise DataError(f"line {lineno}: feature dimension differs from the first record")
    C = num_classes if num_classes is not None else max(s.label for _, s in samples) + 1
    for lineno, s in samples:
        if s.label >= C:
            raise DataError(f"line {lineno}: label {s.label} >= num_classes {C}")
    if C < 2:
        raise DataError("a dataset needs at least 2 classes")
    return attach_time_channel([s for _, s in samples], C, name)


def attach_time_channel(samples: list[SequenceSample], num_classes: int, name: str,
                        time_range: tuple[float, float] | None = None) -> Dataset:
    """Build a Dataset, appending min-max scaled timestamps when present.

    The range defaults to the samples' own.
    """
    D = samples[0].x.shape[1]
    if samples[0].t is None:
        return Dataset(samples, num_classes, D, name)
    if time_range is None:
        time_range = (min(float(s.t[0]) for s in samples), max(float(s.t[-1]) for s in samples))
    lo, hi = float(time_range[0]), float(time_range[1])
    span = hi - lo if hi > lo else 1.0
    out = [replace(s, x=np.concatenate([s.x, ((s.t - lo) / span)[:, None]], axis=1)) for s in samples]
    return Dataset(out, num_classes, D + 1, name, time_channel=True, time_range=(lo, hi))


def load_dataset(path: str | os.PathLike, num_classes: int | None = None) -> Dataset:
    records = []
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: line {lineno}: expected a JSON object")
            if "meta" in rec and not records:
                meta = rec["meta"]
                continue
            records.append((lineno, rec))
    C = num_classes if num_classes is not None else meta.get("num_classes")
    name = meta.get("name") or os.path.splitext(os.path.basename(str(path)))[0]
    try:
        return _records_to_dataset(records, C, name)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _atomic_write(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_jsonl(ds: Dataset) -> str:
    """One record per line; the time channel is dropped and the raw ``t`` written instead."""
    lines = []
    for s in ds.samples:
        x = s.x[:, : ds.raw_dim] if ds.time_channel else s.x
        rec = {"id": s.id, "label": int(s.label), "x": x.tolist()}
        if s.t is not None:
            rec["t"] = s.t.tolist()
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def rescale_time(ds: Dataset, time_range: tuple[float, float]) -> Dataset:
    """Rebuild the time channel with a given (lo, hi), e.g. the training data's."""
    if not ds.time_channel:
        return ds
    raw = [replace(s, x=s.x[:, : ds.raw_dim]) for s in ds.samples]
    return attach_time_channel(raw, ds.num_classes, ds.name, time_range)


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    _atomic_write(path, dataset_to_jsonl(ds))


# synthetic data --------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    n_per_class: int = 50
    length: int = 64
    dim: int = 2
    noise_std: float = 1.0
    irregular: bool = False
    drift: bool = False
    seed: int = 0
    name: str = "motif"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synth.num_classes must be >= 2")
        if self.length < 16:
            raise ConfigError("synth.length must be >= 16")
        if self.n_per_class < 1:
            raise ConfigError("synth.n_per_class must be >= 1")
        if self.dim < 1:
            raise ConfigError("synth.dim must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("synth.noise_std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def motif_layout(num_classes: int, dim: int) -> list[tuple[int, float]]:
    """(channel, centre in [0, 1]) per class; classes sharing a channel get distinct centres."""
    per_channel = math.ceil(num_classes / dim)
    layout = []
    for c in range(num_classes):
        channel, slot = c % dim, c // dim
        layout.append((channel, (slot + 1) / (per_channel + 1)))
    return layout


def generate_synthetic_motif(spec: SyntheticSpec) -> Dataset:
    """Noise plus one class-specific Gaussian bump.

    The bump has amplitude ``3 * noise_std`` (1.0 if the noise is zero) and width
    ``length / 8`` steps, expressed in continuous time so that irregular
    sampling moves it between indices.  ``drift`` adds a per-sample random walk
    mean with step std ``noise_std / 4``.  ``irregular`` samples timestamps as
    sorted uniforms on [0, 1] and attaches them.
    """
    rng = np.random.default_rng(spec.seed)
    N, D = spec.length, spec.dim
    amplitude = 3.0 * spec.noise_std if spec.noise_std > 0 else 1.0
    width = 1.0 / 8.0  # Gaussian std in time units, N/8 steps on the regular grid
    layout = motif_layout(spec.num_classes, D)
    samples = []
    for c in range(spec.num_classes):
        channel, centre = layout[c]
        for k in range(spec.n_per_class):
            if spec.irregular:
                t = np.sort(rng.uniform(0.0, 1.0, N))
                while np.any(np.diff(t) <= 0):
                    t = np.sort(rng.uniform(0.0, 1.0, N))
            else:
                t = np.linspace(0.0, 1.0, N)
            x = rng.normal(0.0, spec.noise_std, (N, D)) if spec.noise_std > 0 else np.zeros((N, D))
            x[:, channel] += amplitude * np.exp(-0.5 * ((t - centre) / width) ** 2)
            if spec.drift:
                x += np.cumsum(rng.normal(0.0, spec.noise_std / 4.0, (N, D)), axis=0)
            samples.append(SequenceSample(f"{spec.name}-{c}-{k}", c, x, t if spec.irregular else None))
    order = rng.permutation(len(samples))
    return attach_time_channel([samples[i] for i in order], spec.num_classes, spec.name)


# splitting / normalization ---------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        k = self.mean.shape[0]
        out = []
        for s in ds.samples:
            x = s.x.copy()
            x[:, :k] = (x[:, :k] - self.mean) / self.std
            out.append(replace(s, x=x))
        return replace(ds, samples=out)

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        k = ds.raw_dim
        stacked = np.concatenate([s.x[:, :k] for s in ds.samples], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)


def stratified_split(ds: Dataset, ratios: Sequence[float], seed: int) -> list[list[int]]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    parts: list[list[int]] = [[], [], []]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(ratios[0] * idx.size))
        n_val = int(round(ratios[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        if n_train == 0:
            raise StratificationError(f"class {c} has no samples in the train split")
        parts[0] += idx[:n_train].tolist()
        parts[1] += idx[n_train:n_train + n_val].tolist()
        parts[2] += idx[n_train + n_val:].tolist()
    return [sorted(p) for p in parts]


def split_and_normalize(ds: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
                        ) -> tuple[Dataset, Dataset | None, Dataset | None, Normalizer]:
    """Stratified split, then per-channel standardization fit on train only.

    Empty val/test splits come back as ``None``.  The time channel, if any, is
    already in [0, 1] and is left alone.
    """
    parts = stratified_split(ds, ratios, seed)
    train = ds.subset(parts[0], f"{ds.name}-train")
    norm = Normalizer.fit(train)
    out: list[Dataset | None] = [norm.apply(train)]
    for idx, tag in zip(parts[1:], ("val", "test")):
        out.append(norm.apply(ds.subset(idx, f"{ds.name}-{tag}")) if idx else None)
    return out[0], out[1], out[2], norm


def batch_iterator(split: Dataset, batch_size: int, shuffle_seed: int | None = None,
                   dtype=np.float64) -> Iterator[SequenceBatch]:
    """Yield padded batches; the final short batch is emitted as-is."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(split))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(split))
    for start in range(0, len(order), batch_size):
        chunk = [split.samples[i] for i in order[start:start + batch_size]]
        lengths = np.array([s.length for s in chunk], dtype=np.int64)
        N = int(lengths.max())
        values = np.zeros((len(chunk), N, split.feature_dim), dtype=dtype)
        for b, s in enumerate(chunk):
            values[b, : s.length] = s.x
        valid = np.arange(N)[None, :] < lengths[:, None]
        yield SequenceBatch(values, valid, lengths, np.array([s.label for s in chunk], dtype=np.int64),
                            [s.id for s in chunk])
