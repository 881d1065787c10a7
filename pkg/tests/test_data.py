import json

import numpy as np
import pytest

from starformer.data import (Dataset, Normalizer, SequenceSample, SyntheticSpec, attach_time_channel, batch_iterator,
                             dataset_to_jsonl, generate_synthetic_motif, load_dataset, motif_layout,
                             rescale_time, split_and_normalize, stratified_split, write_dataset)
from starformer.errors import ConfigError, DataError, ParseError, StratificationError


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


# loading ----------------------------------------------------------------------

def test_single_record_no_time(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [{"id": "s0", "label": 1, "x": [[1, 2], [3, 4], [5, 6]]}])
    ds = load_dataset(p, num_classes=2)
    assert len(ds) == 1 and ds.feature_dim == 2 and not ds.time_channel
    np.testing.assert_array_equal(ds.samples[0].x, [[1, 2], [3, 4], [5, 6]])


def test_time_channel_appended_and_scaled(tmp_path):
    recs = [{"id": "a", "label": 0, "x": [[1.0], [2.0]], "t": [3.0, 5.0]},
            {"id": "b", "label": 1, "x": [[0.0], [0.0], [1.0]], "t": [1.0, 2.0, 4.0]}]
    ds = load_dataset(write_lines(tmp_path / "t.jsonl", recs))
    assert ds.feature_dim == 2 and ds.raw_dim == 1 and ds.time_channel
    t = np.concatenate([s.x[:, 1] for s in ds.samples])
    assert t.min() == 0.0 and t.max() == 1.0
    np.testing.assert_allclose(ds.samples[0].x[:, 1], [0.5, 1.0])


def test_one_dimensional_x_is_one_channel(tmp_path):
    ds = load_dataset(write_lines(tmp_path / "a.jsonl", [{"id": 0, "label": 0, "x": [1, 2, 3]},
                                                         {"id": 1, "label": 1, "x": [4, 5]}]))
    assert ds.feature_dim == 1 and ds.samples[1].length == 2


@pytest.mark.parametrize("records, error, where", [
    (["not json"], ParseError, "line 1"),
    ([{"id": 0, "label": 0}], ParseError, "line 1"),
    ([{"id": 0, "label": 0, "x": [[1]]}, {"id": 1, "label": 5, "x": [[1]]}], DataError, "line 2"),
    ([{"id": 0, "label": 0, "x": [[1], [2]], "t": [1.0, 1.0]}], DataError, "line 1"),
    ([{"id": 0, "label": 0, "x": [[1], [2]], "t": [2.0, 1.0]}], DataError, "strictly increasing"),
    ([{"id": 0, "label": 0, "x": [[1, 2]]}, {"id": 1, "label": 1, "x": [[1]]}], DataError, "line 2"),
    ([{"id": 0, "label": 0, "x": [[1]], "t": [0.0]}, {"id": 1, "label": 1, "x": [[1]]}], DataError, "line 2"),
    ([{"id": 0, "label": 0, "x": []}], DataError, "line 1"),
    ([{"id": 0, "label": -1, "x": [[1]]}], DataError, "line 1"),
    ([{"id": 0, "label": 0, "x": [[float("nan")]]}], DataError, "NaN"),
])
def test_loader_rejects_with_location(tmp_path, records, error, where):
    p = tmp_path / "bad.jsonl"
    p.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in records))
    with pytest.raises(error, match=where):
        load_dataset(p, num_classes=2)


def test_label_beyond_meta_classes(tmp_path):
    p = write_lines(tmp_path / "m.jsonl", [{"meta": {"num_classes": 2}}, {"id": 0, "label": 1, "x": [[1]]},
                                           {"id": 1, "label": 2, "x": [[1]]}])
    with pytest.raises(DataError, match="line 3"):
        load_dataset(p)


def _random_dataset(rng, with_t):
    samples = []
    for i in range(12):
        n = int(rng.integers(1, 9))
        t = np.cumsum(rng.uniform(0.1, 1.0, n)) if with_t else None
        samples.append(SequenceSample(f"s{i}", int(rng.integers(0, 3)), rng.standard_normal((n, 2)), t))
    return attach_time_channel(samples, 3, "rt")


@pytest.mark.parametrize("with_t", [False, True])
def test_write_read_round_trip(tmp_path, with_t):
    ds = _random_dataset(np.random.default_rng(0), with_t)
    write_dataset(ds, tmp_path / "rt.jsonl")
    back = load_dataset(tmp_path / "rt.jsonl")
    assert (back.num_classes, back.feature_dim, back.name, back.time_channel) == \
        (ds.num_classes, ds.feature_dim, ds.name, ds.time_channel)
    for a, b in zip(ds.samples, back.samples):
        assert a.id == b.id and a.label == b.label
        assert np.array_equal(a.x, b.x)
        assert (a.t is None and b.t is None) or np.array_equal(a.t, b.t)


def test_subset_rescaled_with_parent_range(tmp_path):
    ds = generate_synthetic_motif(SyntheticSpec(num_classes=2, n_per_class=5, length=16, irregular=True))
    part = ds.subset([0, 3, 4], "part")
    write_dataset(part, tmp_path / "part.jsonl")
    back = rescale_time(load_dataset(tmp_path / "part.jsonl"), ds.time_range)
    for a, b in zip(part.samples, back.samples):
        np.testing.assert_allclose(a.x, b.x, rtol=0, atol=1e-15)


def test_writer_emits_one_line_per_sample(tmp_path):
    ds = generate_synthetic_motif(SyntheticSpec(num_classes=3, n_per_class=4, length=16))
    assert len(dataset_to_jsonl(ds).splitlines()) == 12


# synthetic generator ----------------------------------------------------------

def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_classes=3, n_per_class=4, length=20, drift=True, irregular=True, seed=7)
    assert dataset_to_jsonl(generate_synthetic_motif(spec)) == dataset_to_jsonl(generate_synthetic_motif(spec))
    other = SyntheticSpec(num_classes=3, n_per_class=4, length=20, drift=True, irregular=True, seed=8)
    assert dataset_to_jsonl(generate_synthetic_motif(spec)) != dataset_to_jsonl(generate_synthetic_motif(other))


def test_synthetic_shapes():
    ds = generate_synthetic_motif(SyntheticSpec(num_classes=4, n_per_class=6, length=32, dim=2, irregular=True))
    assert len(ds) == 24 and ds.num_classes == 4 and ds.feature_dim == 3
    assert all(s.length == 32 for s in ds.samples)
    assert np.bincount(ds.labels).tolist() == [6] * 4


def test_synthetic_spec_validation():
    for bad in (dict(num_classes=1), dict(length=8), dict(noise_std=-1.0), dict(dim=0)):
        with pytest.raises(ConfigError):
            SyntheticSpec(**bad)


def test_noiseless_nearest_centroid_is_perfect():
    ds = generate_synthetic_motif(SyntheticSpec(num_classes=5, n_per_class=6, length=24, dim=2, noise_std=0.0))
    X = np.stack([s.x.ravel() for s in ds.samples])
    y = ds.labels
    centroids = np.stack([X[y == c].mean(axis=0) for c in range(5)])
    pred = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(axis=-1), axis=1)
    assert np.all(pred == y)


def test_motif_layout_distinct():
    lay = motif_layout(5, 2)
    assert len(set(lay)) == 5 and all(0 < c < 1 for _, c in lay)


def _fails_stationarity(x, windows=4, z=4.0):
    """Mean-shift check: some window mean departs from the first by more than z standard errors."""
    w = len(x) // windows
    means = np.array([x[i * w:(i + 1) * w].mean() for i in range(windows)])
    sd = np.std(np.diff(x)) / np.sqrt(2.0)  # noise level, insensitive to a slow trend
    return bool(np.max(np.abs(means - means[0])) > z * sd * np.sqrt(2.0 / w))


def test_drift_makes_sequences_non_stationary():
    rates = {}
    for drift in (False, True):
        fails = total = 0
        for seed in range(5):
            spec = SyntheticSpec(num_classes=4, n_per_class=20, length=64, dim=2, drift=drift, seed=seed)
            for s in generate_synthetic_motif(spec).samples:
                # motif-free channel: the bump would register as a shift
                ch = 1 - motif_layout(4, 2)[s.label][0]
                fails += _fails_stationarity(s.x[:, ch])
                total += 1
        rates[drift] = fails / total
    assert rates[True] > rates[False]
    assert rates[False] < 0.1  # the check itself rarely fires on stationary noise


# splits -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def motif():
    return generate_synthetic_motif(SyntheticSpec(num_classes=3, n_per_class=20, length=16, irregular=True,
                                                  drift=True, seed=3))


def test_split_all_train(motif):
    train, val, test, _ = split_and_normalize(motif, (1.0, 0.0, 0.0), seed=0)
    assert len(train) == len(motif) and val is None and test is None


def test_split_normalization_from_train_only(motif):
    train, val, test, norm = split_and_normalize(motif, (0.6, 0.2, 0.2), seed=1)
    stacked = np.concatenate([s.x for s in train.samples])
    k = motif.raw_dim
    assert np.all(np.abs(stacked[:, :k].mean(axis=0)) < 1e-9)
    assert np.all(np.abs(stacked[:, :k].std(axis=0) - 1.0) < 1e-9)
    # the time channel is left in [0, 1]
    assert stacked[:, k].min() >= 0.0 and stacked[:, k].max() <= 1.0
    refit = Normalizer.fit(test)
    assert not np.allclose(refit.mean, norm.mean)


def test_split_class_proportions(motif):
    ratios = (0.6, 0.2, 0.2)
    parts = stratified_split(motif, ratios, seed=2)
    assert sorted(sum(parts, [])) == list(range(len(motif)))
    labels = motif.labels
    for part, r in zip(parts, ratios):
        for c in range(3):
            assert abs(int(np.sum(labels[part] == c)) - r * 20) <= 1


def test_split_is_seeded(motif):
    assert stratified_split(motif, (0.6, 0.2, 0.2), 4) == stratified_split(motif, (0.6, 0.2, 0.2), 4)
    assert stratified_split(motif, (0.6, 0.2, 0.2), 4) != stratified_split(motif, (0.6, 0.2, 0.2), 5)


def test_split_errors(motif):
    with pytest.raises(ConfigError):
        stratified_split(motif, (0.5, 0.2), 0)
    tiny = motif.subset([0, 1, 2, 3], "tiny")
    with pytest.raises(StratificationError):
        stratified_split(tiny, (0.1, 0.0, 0.9), 0)


# batching ---------------------------------------------------------------------

def _ragged(n=10):
    rng = np.random.default_rng(9)
    samples = [SequenceSample(f"r{i}", i % 2, rng.standard_normal((int(rng.integers(1, 7)), 2))) for i in range(n)]
    return Dataset(samples, 2, 2)


def test_batch_sizes_and_label_multiset():
    ds = _ragged(10)
    batches = list(batch_iterator(ds, 4, shuffle_seed=3))
    assert [b.size for b in batches] == [4, 4, 2]
    labels = np.concatenate([b.labels for b in batches])
    assert sorted(labels.tolist()) == sorted(ds.labels.tolist())


def test_equal_lengths_all_valid():
    ds = Dataset([SequenceSample(str(i), 0, np.ones((5, 1))) for i in range(3)] +
                 [SequenceSample("x", 1, np.ones((5, 1)))], 2, 1)
    for b in batch_iterator(ds, 2):
        assert b.valid.all()


def test_padding_preserves_values():
    ds = _ragged(10)
    by_id = {s.id: s for s in ds.samples}
    for b in batch_iterator(ds, 3, shuffle_seed=1):
        assert b.values.shape[1] == b.lengths.max()
        for i, sid in enumerate(b.ids):
            n = b.lengths[i]
            np.testing.assert_array_equal(b.values[i, :n], by_id[sid].x)
            assert np.all(b.values[i, n:] == 0.0)


def test_shuffle_is_seeded():
    ds = _ragged(10)
    ids = lambda seed: [sid for b in batch_iterator(ds, 4, shuffle_seed=seed) for sid in b.ids]  # noqa: E731
    assert ids(1) == ids(1) and ids(1) != ids(2)
    assert [sid for b in batch_iterator(ds, 4) for sid in b.ids] == [s.id for s in ds.samples]
