import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from cfprompt.errors import ContractViolation
from cfprompt.numerics import numeric_jacobian
from cfprompt.scm import (
    GLYPHS,
    AnalyticScm,
    ScmSpec,
    analytic_scm_sample,
    glyph_union_mask,
    make_splits,
    render_image,
    sample_class_conditional,
    sample_dataset,
    sample_scm,
    true_counterfactual,
    true_counterfactuals,
)

SPEC = ScmSpec()


def test_spec_validation():
    with pytest.raises(ContractViolation):
        ScmSpec(num_classes=2)
    with pytest.raises(ContractViolation):
        ScmSpec(sigma_x=0.3)
    with pytest.raises(ContractViolation):
        ScmSpec(image_dim=64)


def test_glyphs_are_distinct():
    flat = GLYPHS.reshape(len(GLYPHS), -1)
    assert len({m.tobytes() for m in flat}) == len(GLYPHS)
    assert flat.sum(1).min() > 0


def test_sample_is_deterministic():
    a, b = sample_scm(SPEC, 3), sample_scm(SPEC, 3)
    assert a.y == b.y and a.x.tobytes() == b.x.tobytes() and a.u_x.tobytes() == b.u_x.tobytes()


def test_image_depends_only_on_parents_and_texture():
    spec = ScmSpec(sigma_x=0.0)
    n = sample_scm(spec, 0).n
    a = render_image(2, n, np.random.default_rng(1).uniform(size=256), 0.0)
    b = render_image(2, n, np.random.default_rng(2).uniform(size=256), 0.0)
    np.testing.assert_array_equal(a, b)


def test_oracle_consistency():
    d = sample_dataset(SPEC, 50, 0)
    assert render_image(d.y, d.n, d.u_x, SPEC.sigma_x, SPEC.num_classes).tobytes() == d.x.tobytes()
    assert np.all((d.x >= 0) & (d.x <= 1))


def test_texture_independent_of_label():
    d = sample_dataset(SPEC, 10_000, 5)
    u = d.u_x - d.u_x.mean(0)
    y = d.y - d.y.mean()
    corr = (u * y[:, None]).mean(0) / (u.std(0) * y.std())
    assert np.abs(corr).max() < 0.05


def test_unknown_class_rejected():
    with pytest.raises(ContractViolation):
        render_image(9, np.zeros(4), np.zeros(256))


def test_noiseless_render_is_composite():
    s = sample_scm(ScmSpec(sigma_x=0.0), 4)
    img = render_image(s.y, s.n, s.u_x, 0.0)
    assert np.all(img[GLYPHS[s.y]] == 0.9)
    assert np.all((img[~GLYPHS[s.y]] >= 0.1) & (img[~GLYPHS[s.y]] <= 0.55))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 10_000))
def test_label_swap_only_touches_glyph_union(a, b, seed):
    s = sample_scm(SPEC, seed)
    xa, xb = render_image(a, s.n, s.u_x, SPEC.sigma_x), render_image(b, s.n, s.u_x, SPEC.sigma_x)
    outside = ~glyph_union_mask(a, b)
    np.testing.assert_array_equal(xa[outside], xb[outside])


def test_texture_mean_matches_noiseless_render():
    s = sample_scm(SPEC, 1)
    u = np.random.default_rng(0).uniform(size=(1000, 256))
    mean = render_image(np.full(1000, s.y), np.repeat(s.n[None], 1000, 0), u, SPEC.sigma_x).mean(0)
    assert np.abs(mean - render_image(s.y, s.n, s.u_x, 0.0)).max() < 0.01


def test_counterfactual_involution_and_background():
    s = sample_scm(SPEC, 11)
    y_cf = (s.y + 1) % SPEC.num_classes
    x_cf = true_counterfactual(s, y_cf, SPEC)
    back = type(s)(s.u_x, s.u_y, s.u_n, y_cf, s.n, x_cf)
    assert true_counterfactual(back, s.y, SPEC).tobytes() == s.x.tobytes()
    outside = ~glyph_union_mask(s.y, y_cf)
    np.testing.assert_array_equal(x_cf[outside], s.x[outside])
    with pytest.raises(ContractViolation):
        true_counterfactual(s, s.y, SPEC)


def test_independent_classifier_recognises_oracle_counterfactuals():
    train = sample_dataset(SPEC, 1500, 0)
    clf = LogisticRegression(max_iter=2000).fit(train.x, train.y)
    assert clf.score(train.x, train.y) >= 0.95
    test = sample_dataset(SPEC, 300, 1)
    y_cf = (test.y + np.random.default_rng(2).integers(1, SPEC.num_classes, 300)) % SPEC.num_classes
    x_cf = true_counterfactuals(test, y_cf, SPEC)
    assert np.mean(clf.predict(x_cf) == y_cf) >= 0.9


def test_splits():
    sp = make_splits(SPEC, [0, 1, 2, 3], [4, 5], 16, seed=0)
    assert len(sp.train) == 64
    assert np.all(np.bincount(sp.train.y, minlength=6)[:4] == 16)
    assert not np.isin(sp.train.y, [4, 5]).any()
    again = make_splits(SPEC, [0, 1, 2, 3], [4, 5], 16, seed=0)
    assert again.train.x.tobytes() == sp.train.x.tobytes() and again.test.x.tobytes() == sp.test.x.tobytes()
    with pytest.raises(ContractViolation):
        make_splits(SPEC, [0, 1], [1, 2], 4, 0)
    with pytest.raises(ContractViolation):
        make_splits(SPEC, [0, 1], [2], 0, 0)


def test_class_conditional_labels():
    d = sample_class_conditional(SPEC, [1, 4], 7, 0)
    assert np.array_equal(np.bincount(d.y, minlength=6), [0, 7, 0, 0, 7, 0])


@pytest.mark.parametrize("family", ["additive-orthogonal", "post-nonlinear"])
@pytest.mark.parametrize("seed", range(5))
def test_analytic_exact_inverse(family, seed):
    sample, g, h = analytic_scm_sample(3, family, seed)
    y, n = np.array([sample.y]), sample.n[None]
    x = sample.x[None]
    np.testing.assert_allclose(h(g(x, y, n), y, n), x, atol=1e-12)


@pytest.mark.parametrize("family", ["additive-orthogonal", "post-nonlinear"])
def test_analytic_jacobian_positive_definite(family):
    scm = AnalyticScm(dim=4, family=family, unit_scale=False, seed=3)
    y, n, u, _ = scm.sample(100, np.random.default_rng(0))
    for i in range(100):
        J = numeric_jacobian(lambda uu: scm.f(y[i:i + 1], n[i:i + 1], uu[None])[0], u[i])
        np.testing.assert_allclose(J, scm.jacobian_f(y[i], n[i], u[i]), atol=1e-8)
        assert np.linalg.eigvals(J).real.min() > 0


def test_analytic_latent_independent_of_parents():
    scm = AnalyticScm(dim=3, seed=1)
    y, n, u, x = scm.sample(10_000, np.random.default_rng(1))
    lat = scm.g_star(x, y, n)
    c = np.corrcoef(lat.T, np.column_stack([y, n]).T)[:3, 3:]
    assert np.abs(c).max() < 0.05


def test_analytic_rejects_small_dim():
    with pytest.raises(ContractViolation):
        AnalyticScm(dim=2)
