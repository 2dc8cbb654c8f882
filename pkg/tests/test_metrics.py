import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repudiate.attacks import EnhancedMIA
from repudiate.data import MiniBatchSpec, make_schedule, sample_iid_batches, synth_gaussian
from repudiate.metrics import (MetricReport, freq_profile, make_probe_plan, model_distance, prediction_diff,
                               profiles_tsv, score_diff, summarize, uniformity)
from repudiate.model import Hyperparams, ModelSpec, fit, per_sample_loss


@pytest.fixture(scope="module")
def enhanced():
    pool = synth_gaussian(80, 4, 2, seed=0, class_separation=2.0)
    spec = ModelSpec.logreg(4, 2)
    a = fit(spec, pool.subset(np.arange(40)), Hyperparams(0.2, 10, 60), 0, 1)
    b = fit(spec, pool.subset(np.arange(40)), Hyperparams(0.2, 10, 60), 2, 3)
    attack = EnhancedMIA(pool, spec)
    attack.calibrate(a, np.arange(40, 80))
    return pool, spec, attack, a, b


def test_model_distance_values():
    assert model_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert model_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    with pytest.raises(ValueError):
        model_distance([1.0], [1.0, 2.0])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_model_distance_symmetric_and_permutation_invariant(values, rnd):
    a = np.array(values)
    b = a[::-1] + 0.5
    perm = list(range(len(a)))
    rnd.shuffle(perm)
    assert model_distance(a, b) == pytest.approx(model_distance(b, a))
    assert model_distance(a[perm], b[perm]) == pytest.approx(model_distance(a, b))
    assert model_distance(a, b) >= 0


def test_prediction_diff_identical_models_is_zero(enhanced):
    _, _, attack, a, _ = enhanced
    probes = [(0, 1), (2,), (5, 6, 7)]
    assert prediction_diff(attack, a, [a, a, a], probes) == 0.0


def test_prediction_diff_recount(enhanced):
    _, _, attack, a, b = enhanced
    probes = [(i,) for i in range(40)]
    expect = sum(attack.predict(a, [i])[0] != attack.predict(b, [i])[0] for i in range(40))
    assert prediction_diff(attack, a, [b] * 40, probes) == pytest.approx(100 * expect / 40)
    with pytest.raises(ValueError):
        prediction_diff(attack, a, [b], [()])
    with pytest.raises(ValueError):
        prediction_diff(attack, a, [b, b], [(0,)])


def test_score_diff_is_abs_loss_difference(enhanced):
    pool, spec, attack, a, b = enhanced
    idx = np.arange(10)
    la = per_sample_loss(a, spec, pool.features[idx], pool.labels[idx])
    lb = per_sample_loss(b, spec, pool.features[idx], pool.labels[idx])
    np.testing.assert_allclose(score_diff(attack, a, b, idx), np.abs(la - lb), rtol=0, atol=0)
    assert np.array_equal(score_diff(attack, a, b, idx), score_diff(attack, b, a, idx))
    assert not score_diff(attack, a, a, idx).any()


def test_probe_plan_settings():
    plan = make_probe_plan([(3,), (7,)], 20, np.arange(20, 40), seed=0)
    assert plan.diff == ((3,), (7,))
    for j, g in enumerate((3, 7)):
        assert len(plan.common[j]) == 5 and g not in plan.common[j] and max(plan.common[j]) < 20
        assert all(20 <= v < 40 for v in plan.validation[j])
    assert make_probe_plan([(3,), (7,)], 20, np.arange(20, 40), seed=0) == plan
    with pytest.raises(ValueError):
        make_probe_plan([(3,)], 20, np.arange(20, 22), seed=0)


def test_uniformity_of_dataloader_loop_is_zero():
    sched = make_schedule(50, 5, 3, 0)
    assert uniformity(sched.batches, 50) == 0.0
    prof = freq_profile(sched.batches, 50)
    assert np.all(prof == prof[0]) and prof.sum() == pytest.approx(1.0)


def test_uniformity_bounds_and_extremes():
    same = [MiniBatchSpec((0, 1))] * 10
    assert uniformity(same, 4) == pytest.approx(1.0)
    assert uniformity(same, 1000) <= 2.0
    with pytest.raises(ValueError):
        uniformity([], 5)


@given(st.integers(0, 500))
@settings(max_examples=30, deadline=None)
def test_uniformity_never_exceeds_two(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    b = int(rng.integers(1, n + 1))
    batches = sample_iid_batches(n, b, int(rng.integers(1, 20)), seed)
    u = uniformity(batches, n)
    assert 0.0 <= u <= 2.0
    assert freq_profile(batches, n).sum() == pytest.approx(1.0)


def test_iid_baseline_is_far_from_uniform():
    assert uniformity(sample_iid_batches(2000, 20, 2000, 0), 2000) > 0.15


def test_report_outputs():
    r = MetricReport({0: 1e-4, 3: 2e-4}, {"lira": {"diff": 0.0, "common": 20.0, "validation": 0.0}},
                     {"lira": [0.1, 0.2, 0.3]}, {0: 0.01, 3: 0.02}, {"seed": 0})
    j = r.to_json()
    assert j["s_a"]["lira"]["count"] == 3
    assert j["uniformity"]["summary"]["mean"] == pytest.approx(0.015)
    lines = r.to_csv().splitlines()
    assert lines[0] == "metric,key,setting,value" and "c_a,lira,common,20.0" in lines
    with pytest.raises(ValueError):
        MetricReport(c_a={"x": {"diff": 101.0}})


def test_summarize_and_tsv():
    s = summarize([1.0, 2.0, 3.0])
    assert s["median"] == 2.0 and s["count"] == 3
    assert summarize([])["count"] == 0
    tsv = profiles_tsv({"a": np.array([0.5, 0.5]), "b": np.array([1.0])})
    assert tsv.splitlines()[0] == "# rank\ta\tb"
    assert tsv.splitlines()[2] == "1\t0.5\t"
