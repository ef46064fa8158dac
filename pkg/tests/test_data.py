import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from prevshift.calibration import apply_map, fit_calibration
from prevshift.data import (
    ScoreDataset,
    SyntheticSpec,
    clamp_and_normalize,
    empirical_prevalence,
    imbalance_ratio,
    perturb_prevalence,
    read_scores,
    split_dataset,
    subsample_at_ir,
    subsample_counts,
    synth_generate,
    target_prevalence_for_ir,
    write_scores,
)
from prevshift.errors import (
    InsufficientSamplesError,
    InvalidSpecError,
    ParseError,
    SchemaError,
    ZeroPrevalenceError,
)
from prevshift.metrics import cwce


def make_ds(labels, n_classes=2, seed=0):
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    return ScoreDataset(rng.normal(size=(labels.size, n_classes)), labels, n_classes)


# -- ScoreDataset ----------------------------------------------------------


def test_dataset_rejects_bad_labels():
    with pytest.raises(SchemaError):
        ScoreDataset(np.zeros((2, 2)), [0, 2])
    with pytest.raises(SchemaError):
        ScoreDataset(np.zeros((2, 2)), [0, -1])


def test_dataset_rejects_nonfinite_logits():
    with pytest.raises(SchemaError):
        ScoreDataset(np.array([[0.0, np.inf]]), [0])


def test_dataset_is_immutable():
    ds = make_ds([0, 1])
    with pytest.raises(ValueError):
        ds.logits[0, 0] = 1.0


# -- prevalence ------------------------------------------------------------


@pytest.mark.parametrize(
    "labels, expected",
    [([0, 1, 0, 1], [0.5, 0.5]), ([0, 0, 0, 1], [0.75, 0.25]), ([0, 0], [1.0, 0.0])],
)
def test_empirical_prevalence(labels, expected):
    np.testing.assert_array_equal(empirical_prevalence(make_ds(labels)), expected)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=200))
def test_empirical_prevalence_sums_to_one(labels):
    p = empirical_prevalence(make_ds(labels, 5))
    assert abs(p.sum() - 1.0) < 1e-12


def test_imbalance_ratio():
    assert imbalance_ratio([0.5, 0.5]) == 1.0
    assert imbalance_ratio([10 / 11, 1 / 11]) == pytest.approx(10.0, rel=1e-12)
    with pytest.raises(ZeroPrevalenceError):
        imbalance_ratio([0.7, 0.3, 0.0])


def test_target_prevalence_examples():
    np.testing.assert_allclose(target_prevalence_for_ir(2, 1.0), [0.5, 0.5])
    np.testing.assert_allclose(target_prevalence_for_ir(2, 10.0), [10 / 11, 1 / 11], rtol=1e-12)
    np.testing.assert_allclose(target_prevalence_for_ir(3, 4.0), [4 / 7, 2 / 7, 1 / 7], rtol=1e-12)


@given(st.integers(2, 8), st.floats(1.0, 10.0))
def test_target_prevalence_hits_ratio(c, r):
    p = target_prevalence_for_ir(c, r)
    assert abs(imbalance_ratio(p) - r) < 1e-9
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(np.diff(p) <= 0)


# -- splitting -------------------------------------------------------------


def test_split_default_fractions():
    ds = make_ds(np.repeat([0, 1], 50))
    parts = split_dataset(ds, seed=1)
    assert [len(p) for p in parts] == [30, 10, 50, 10]
    np.testing.assert_array_equal(parts.test.class_counts(), [5, 5])


def test_split_all_to_dep():
    ds = make_ds(np.repeat([0, 1], 20))
    parts = split_dataset(ds, {"dep": 1.0, "test": 0.0, "train": 0.0, "val": 0.0}, seed=0)
    assert parts.dep == ds
    assert len(parts.test) == len(parts.train) == len(parts.val) == 0


def test_split_fractions_must_sum_to_one():
    with pytest.raises(InvalidSpecError):
        split_dataset(make_ds([0, 1] * 10), {"dep": 0.3, "test": 0.1, "train": 0.4, "val": 0.1})


def test_split_balanced_test_truncates_to_minority():
    labels = np.array([0] * 190 + [1] * 10)
    parts = split_dataset(make_ds(labels), seed=3)
    counts = parts.test.class_counts()
    assert counts[0] == counts[1] and 0 < counts[1] <= 10
    assert sum(len(p) for p in parts) == 200


def test_split_insufficient_samples():
    labels = np.array([0] * 50)
    with pytest.raises(InsufficientSamplesError):
        split_dataset(make_ds(labels), seed=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=30, max_size=120), st.integers(0, 2**32 - 1), st.booleans())
def test_split_is_a_partition(labels, seed, stratify):
    labels = np.array(labels)
    if stratify and np.bincount(labels, minlength=3).min() < 3:
        return
    ds = ScoreDataset(np.arange(labels.size * 3, dtype=float).reshape(-1, 3), labels, 3)
    parts = split_dataset(ds, seed=seed, stratify=stratify)
    rows = np.concatenate([p.logits[:, 0] for p in parts])
    assert sorted(rows.tolist()) == sorted(ds.logits[:, 0].tolist())


# -- subsampling -----------------------------------------------------------


def test_subsample_balanced_identity():
    ds = make_ds(np.repeat([0, 1], 1000))
    assert subsample_at_ir(ds, 1.0, seed=0) == ds


def test_subsample_ratio_ten():
    ds = make_ds(np.repeat([0, 1], 1000))
    sub = subsample_at_ir(ds, 10.0, seed=0)
    np.testing.assert_array_equal(sub.class_counts(), [1000, 100])


def test_subsample_empty_class():
    ds = make_ds(np.zeros(20, dtype=int))
    with pytest.raises(InsufficientSamplesError):
        subsample_at_ir(ds, 2.0, seed=0)


@given(st.integers(20, 2000), st.integers(20, 2000), st.floats(1.0, 10.0))
def test_subsample_counts_best_integer_fit(n0, n1, r):
    target = target_prevalence_for_ir(2, r)
    counts = subsample_counts([n0, n1], target)
    assert counts[0] <= n0 and counts[1] <= n1
    # one class is exhausted, the other count is the integer closest to the target ratio
    if counts[0] == n0:
        m = counts[1]
        best = min(range(1, n1 + 1), key=lambda k: abs(n0 / k - r))
        assert abs(n0 / m - r) <= abs(n0 / best - r) + 1e-9 or m == n1
    else:
        assert counts[1] == n1


def test_subsample_keeps_row_order_and_is_seeded():
    ds = make_ds(np.repeat([0, 1], 300), seed=5)
    a = subsample_at_ir(ds, 3.0, seed=11)
    b = subsample_at_ir(ds, 3.0, seed=11)
    assert a == b
    assert subsample_at_ir(ds, 3.0, seed=12) != a


# -- perturbation ----------------------------------------------------------


def test_perturb_zero_std_identity():
    np.testing.assert_array_equal(perturb_prevalence([0.5, 0.5], 0.0, seed=3), [0.5, 0.5])


def test_clamp_then_normalize_example():
    q = clamp_and_normalize([0.93, -0.02])
    np.testing.assert_allclose(q, [0.93 / 0.94, 0.01 / 0.94], rtol=1e-12)
    assert q[0] == pytest.approx(0.98936, abs=1e-5)
    assert q[1] == pytest.approx(0.01064, abs=1e-5)


@given(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda v: sum(v) > 0),
    st.floats(0.0, 2.0),
    st.integers(0, 2**32 - 1),
)
def test_perturb_always_valid_strict(raw, std, seed):
    p = np.array(raw) / sum(raw)
    p = p / p.sum()
    q = perturb_prevalence(p, std, seed)
    assert abs(q.sum() - 1.0) < 1e-9
    assert np.all(q > 0)
    if std > 0 or p.min() < 0.01:
        assert q.min() >= 0.01 / np.maximum(p, 0.01).sum() - 1e-12 or std > 0


def test_perturb_floor_property():
    for seed in range(50):
        q = perturb_prevalence([0.95, 0.05], 0.3, seed)
        rng = np.random.default_rng(seed)
        clamped = np.maximum(rng.normal([0.95, 0.05], 0.3), 0.01)
        assert q.min() >= 0.01 / clamped.sum() - 1e-15


# -- synthetic tasks -------------------------------------------------------


def binary_spec(**kw):
    base = dict(class_means=((1.2, 0.0), (0.0, 1.2)), scale=1.0, n_dev=20000)
    base.update(kw)
    return SyntheticSpec(**base)


def test_synth_identity_distortion_is_calibrated():
    data = synth_generate(binary_spec(n_dev=50000), seed=4)
    from prevshift.calibration import softmax

    scores = softmax(data.dev.logits)
    np.testing.assert_allclose(scores, data.dev_posteriors, atol=1e-12)
    assert cwce(scores, data.dev.labels) < 0.02


def test_synth_temperature_distortion_recovered():
    data = synth_generate(binary_spec(t_distort=2.0), seed=5)
    m = fit_calibration(data.dev, "temperature")
    assert 1.9 <= m.t <= 2.1


def test_synth_likelihoods_shared_across_splits():
    spec = binary_spec(n_dev=20000, n_dep=20000, dep_prevalence=(10 / 11, 1 / 11))
    data = synth_generate(spec, seed=6)
    np.testing.assert_allclose(empirical_prevalence(data.dep), [10 / 11, 1 / 11], atol=0.01)
    for k in range(2):
        a = data.dev_features[data.dev.labels == k]
        b = data.dep_features[data.dep.labels == k]
        for dim in range(2):
            assert ks_2samp(a[:, dim], b[:, dim]).pvalue > 0.001


def test_synth_distorted_logits_are_inverse_affine():
    spec = binary_spec(t_distort=1.7, b_distort=(0.4, -0.4), n_dev=100)
    data = synth_generate(spec, seed=0)
    from prevshift.calibration import CalibrationMap

    restored = apply_map(CalibrationMap("affine", 1.7, (0.4, -0.4)), data.dev)
    np.testing.assert_allclose(restored, data.dev_posteriors, atol=1e-12)


def test_synth_rejects_bad_spec():
    with pytest.raises(InvalidSpecError):
        synth_generate(binary_spec(t_distort=0.0), seed=0)
    with pytest.raises(InvalidSpecError):
        synth_generate(binary_spec(dev_prevalence=(0.5, 0.6)), seed=0)


# -- score files -----------------------------------------------------------


def test_scores_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = ScoreDataset(rng.normal(size=(50, 3)) * 1e3, rng.integers(0, 3, 50), 3)
    path = tmp_path / "s.csv"
    write_scores(ds, path, class_names=["a", "b", "c"], metadata={"source": "test"})
    assert read_scores(path) == ds
    assert (tmp_path / "s.csv.json").exists()


def test_scores_header_parses(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("logit_0,logit_1,logit_2,label\n0.1,0.2,0.3,2\n-1,0,1e-3,0\n")
    ds = read_scores(path)
    assert ds.class_count == 3
    np.testing.assert_array_equal(ds.labels, [2, 0])
    np.testing.assert_array_equal(ds.logits[1], [-1.0, 0.0, 1e-3])


def test_scores_label_out_of_range(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("logit_0,logit_1,label\n0.1,0.2,2\n")
    with pytest.raises(SchemaError):
        read_scores(path)


def test_scores_parse_error_has_line(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("logit_0,logit_1,label\n0.1,0.2,1\n0.1,abc,0\n")
    with pytest.raises(ParseError) as info:
        read_scores(path)
    assert info.value.line == 3


def test_scores_column_mismatch(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("logit_0,logit_1,label\n0.1,0.2,0.3,1\n")
    with pytest.raises(SchemaError):
        read_scores(path)
    path.write_text("a,b,label\n0.1,0.2,1\n")
    with pytest.raises(SchemaError):
        read_scores(path)
