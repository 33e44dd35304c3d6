import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfprompt.counterfactual import (
    CounterfactualPair,
    inverse_pair_harness,
    quality_metrics,
    select_cf_label,
)
from cfprompt.errors import ContractViolation
from cfprompt.scm import GLYPHS, AnalyticScm, ScmSpec, sample_dataset, true_counterfactuals


@pytest.mark.parametrize("probs,y,want", [([0.6, 0.3, 0.1], 0, 1), ([0.2, 0.5, 0.3], 1, 2), ([0.4, 0.3, 0.3], 0, 1)])
def test_similarity_runner_up(probs, y, want):
    assert select_cf_label(probs, y, "similarity") == want


def test_label_selection_contracts():
    with pytest.raises(ContractViolation):
        select_cf_label([1.0], 0)
    with pytest.raises(ContractViolation):
        select_cf_label([0.5, 0.5], 0, "nearest")
    with pytest.raises(ContractViolation):
        select_cf_label([0.5, 0.3, 0.2], 0, candidates=[0])


def test_candidates_restrict_choice():
    assert select_cf_label([0.1, 0.2, 0.6, 0.1], 2, candidates=[0, 3]) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.data(), st.integers(0, 2**31))
def test_selection_never_returns_factual(weights, data, seed):
    p = np.array(weights) / np.sum(weights)
    y = data.draw(st.integers(0, len(p) - 1))
    rng = np.random.default_rng(seed)
    for strategy in ("similarity", "random"):
        c = select_cf_label(p, y, strategy, rng)
        assert c != y and 0 <= c < len(p)
    best = select_cf_label(p, y, "similarity")
    assert p[best] == np.delete(p, y).max()


def test_random_strategy_is_uniform_over_others():
    rng = np.random.default_rng(0)
    picks = [select_cf_label([0.7, 0.1, 0.1, 0.1], 1, "random", rng) for _ in range(3000)]
    counts = np.bincount(picks, minlength=4)
    assert counts[1] == 0 and np.all(np.abs(counts[[0, 2, 3]] / 3000 - 1 / 3) < 0.04)


def test_pair_rejects_equal_labels():
    with pytest.raises(ContractViolation):
        CounterfactualPair(np.zeros(4), 1, 1, np.zeros(4), 1.0, np.zeros(4))


def test_identity_counterfactual_quality():
    x = np.random.default_rng(0).uniform(size=(3, 256))
    probs = np.tile([0.7, 0.2, 0.1, 0, 0, 0], (3, 1))
    q = quality_metrics(x, x, np.zeros(3, int), np.ones(3, int), probs)
    assert np.all(q["l2"] == 0) and not q["label_flipped"].any()
    assert np.all(q["quality_score"] >= 1 - 0.2)


def test_oracle_counterfactual_has_no_leakage():
    spec = ScmSpec()
    d = sample_dataset(spec, 50, 0)
    y_cf = (d.y + 1) % 6
    x_cf = true_counterfactuals(d, y_cf, spec)
    probs = np.eye(6)[y_cf]
    q = quality_metrics(d.x, x_cf, d.y, y_cf, probs, GLYPHS)
    assert np.all(q["non_causal_leakage"] == 0) and q["label_flipped"].all()
    np.testing.assert_allclose(q["causal_distance"], q["l2"], rtol=1e-12)


@pytest.mark.parametrize("family", ["additive-orthogonal", "post-nonlinear"])
def test_harness_exact_case(family):
    rep = inverse_pair_harness(AnalyticScm(family=family, unit_scale=family == "additive-orthogonal"), trials=1000)
    assert rep.max_reconstruction_error <= 1e-10 and rep.max_counterfactual_error <= 1e-10


@pytest.mark.parametrize("delta", [1e-4, 0.01, 0.3])
def test_harness_distortion_bound(delta):
    rep = inverse_pair_harness(AnalyticScm(seed=2), delta=delta, trials=1000, seed=3)
    assert rep.max_counterfactual_error <= delta + 1e-10
    assert rep.max_reconstruction_error <= delta + 1e-10


def test_harness_leak_probe_breaks_counterfactuals():
    rep = inverse_pair_harness(AnalyticScm(), trials=200, leak=0.5)
    assert rep.max_reconstruction_error <= 1e-10
    assert rep.cf_exceeds_reconstruction >= 1


def test_harness_rejects_negative_delta():
    with pytest.raises(ContractViolation):
        inverse_pair_harness(AnalyticScm(), delta=-1.0)
