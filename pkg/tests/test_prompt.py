import numpy as np
import pytest

from cfprompt.errors import ContractViolation
from cfprompt.numerics import ParamSet, forward_and_grad
from cfprompt.prompt import (
    CounterfactualPromptLearner,
    ImageEncoder,
    TextEncoder,
    loss_basic_graph,
    loss_cf_from_scores,
    loss_cf_graph,
    total_loss_graph,
)
from cfprompt.scm import ScmSpec, sample_dataset

from conftest import GRAD_SEEDS, fd_relative_error

D = 8


@pytest.fixture(scope="module")
def data():
    return sample_dataset(ScmSpec(), 120, 0)


@pytest.fixture(scope="module")
def encoder(data):
    return ImageEncoder(embed_dim=D, hidden=(16,), n_steps=40, batch_size=32).fit(data.x, data.y)


def make_learner(encoder, seed=0, randomize_meta=True, **kw):
    lr = CounterfactualPromptLearner(encoder, TextEncoder(6, token_dim=D, embed_dim=D, seed=seed),
                                     random_state=seed, **kw).init_state()
    if randomize_meta:
        r = np.random.default_rng(seed + 100)
        lr.params_ = ParamSet({k: v + r.normal(scale=0.3, size=v.shape) for k, v in lr.params_.values.items()})
    return lr


def unit(r, n, d=D):
    v = r.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_cf_loss_scalar_oracle():
    assert abs(loss_cf_from_scores(2.0, 0.0) - np.log1p(np.exp(-2.0))) < 1e-12
    assert abs(loss_cf_from_scores(2.0, 0.0) - 0.126928) < 1e-6
    assert abs(loss_cf_from_scores(0.3, 0.3) - np.log(2)) < 1e-15
    assert loss_cf_from_scores(1.0, -1e4) < 1e-300


def test_cf_loss_identical_counterfactual_is_log2(encoder):
    lr = make_learner(encoder)
    v = unit(np.random.default_rng(0), 7)
    assert abs(lr.loss_cf(v, np.arange(7) % 6, v) - np.log(2)) < 1e-12


def test_cf_loss_graph_matches_scalar_form(encoder):
    lr = make_learner(encoder)
    r = np.random.default_rng(1)
    v, v_cf, y = unit(r, 5), unit(r, 5), np.array([0, 3, 1, 1, 5])
    g = np.stack([lr.prompt_embed(c, vi)[0] for c, vi in zip(y, v)])
    want = loss_cf_from_scores((v * g).sum(1), (v_cf * g).sum(1), lr.temperature).mean()
    assert abs(lr.loss_cf(v, y, v_cf) - want) < 1e-12


def test_cf_loss_length_mismatch(encoder):
    lr = make_learner(encoder)
    v = unit(np.random.default_rng(0), 4)
    with pytest.raises(ContractViolation):
        lr.loss_cf(v, np.zeros(4, int), v[:3])


def test_basic_loss_singleton_is_zero(encoder):
    lr = make_learner(encoder)
    assert lr.loss_basic(unit(np.random.default_rng(0), 5), np.full(5, 2), [2]) == 0.0


def test_basic_loss_uniform_is_log_classes(encoder):
    lr = make_learner(encoder)
    v = unit(np.random.default_rng(0), 5)
    v[:, :] = 0.0  # zero embedding: every class prompt has the same dot product
    assert abs(lr.loss_basic(v, np.array([0, 1, 2, 3, 0]), [0, 1, 2, 3]) - np.log(4)) < 1e-9


def test_basic_loss_contracts(encoder):
    lr = make_learner(encoder)
    v = unit(np.random.default_rng(0), 3)
    for classes in ([], [0, 0, 1], [0, 1]):
        with pytest.raises(ContractViolation):
            lr.loss_basic(v, np.array([0, 1, 2]), classes)


def test_total_loss_reduction_and_linearity(encoder):
    lr = make_learner(encoder)
    r = np.random.default_rng(3)
    v, v_cf, y, C = unit(r, 6), unit(r, 6), np.array([0, 1, 2, 3, 0, 1]), [0, 1, 2, 3]
    basic, cf = lr.loss_basic(v, y, C), lr.loss_cf(v, y, v_cf)
    assert lr.total_loss(v, y, v_cf, C, 0.0) == basic
    assert abs(lr.total_loss(v, y, v_cf, C, 1.0) - (basic + cf)) < 1e-12
    assert abs(lr.total_loss(v, y, v_cf, C, 2.5) - (basic + 2.5 * cf)) < 1e-12
    with pytest.raises(ContractViolation):
        lr.total_loss(v, y, v_cf, C, -0.1)


def test_total_gradient_is_linear(encoder):
    lr = make_learner(encoder)
    r = np.random.default_rng(4)
    v, v_cf, y, C = unit(r, 6), unit(r, 6), np.array([0, 1, 2, 3, 0, 1]), [0, 1, 2, 3]
    kw = lr._kw()
    p = lr.params_.values
    _, gb = forward_and_grad(lambda q: loss_basic_graph(q, v=v, y=y, classes=C, **kw), p)
    _, gc = forward_and_grad(lambda q: loss_cf_graph(q, v=v, y=y, v_cf=v_cf, **kw), p)
    _, gt = lr.total_loss_and_grad(v, y, v_cf, C, 1.7)
    for k in p:
        np.testing.assert_allclose(gt[k], gb[k] + 1.7 * gc[k], rtol=0, atol=1e-10)


def _instance(encoder, seed):
    lr = make_learner(encoder, seed % 4)
    r = np.random.default_rng(seed)
    y = r.integers(0, 4, 5)
    return lr, lr._kw(), unit(r, 5), unit(r, 5), y


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_basic_loss_gradient(encoder, seed):
    lr, kw, v, _, y = _instance(encoder, seed)
    assert fd_relative_error(lambda q: loss_basic_graph(q, v=v, y=y, classes=[0, 1, 2, 3], **kw),
                             lr.params_.values) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_cf_loss_gradient(encoder, seed):
    lr, kw, v, v_cf, y = _instance(encoder, seed)
    assert fd_relative_error(lambda q: loss_cf_graph(q, v=v, y=y, v_cf=v_cf, **kw), lr.params_.values) < 1e-4


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_total_loss_gradient(encoder, seed):
    lr, kw, v, v_cf, y = _instance(encoder, seed)
    fn = lambda q: total_loss_graph(q, v=v, y=y, v_cf=v_cf, classes=[0, 1, 2, 3], lam=0.8, **kw)  # noqa: E731
    assert fd_relative_error(fn, lr.params_.values) < 1e-4


def test_prompt_embed_properties(encoder):
    v = unit(np.random.default_rng(0), 4)
    plain = make_learner(encoder, randomize_meta=False)  # last meta layer starts at zero
    g = plain.prompt_embed(1, v)
    np.testing.assert_allclose(g, np.tile(g[0], (4, 1)), atol=1e-15)
    lr = make_learner(encoder)
    g0, g1 = lr.prompt_embed(0, v), lr.prompt_embed(1, v)
    np.testing.assert_allclose(np.linalg.norm(g0, axis=1), 1, atol=1e-9)
    assert np.all(np.abs(g0 - g1).max(1) > 1e-6)
    with pytest.raises(ContractViolation):
        lr.prompt_embed(6, v)


def test_text_encoder_is_frozen_and_seeded():
    a, b = TextEncoder(6, seed=3), TextEncoder(6, seed=3)
    assert a.checksum() == b.checksum() != TextEncoder(6, seed=4).checksum()
    with pytest.raises(ValueError):
        a.class_tokens[0, 0] = 1.0
    c = TextEncoder.from_arrays(**a.arrays())
    assert c.checksum() == a.checksum()


def test_encoder_unit_norm_and_deterministic(encoder, data):
    v = encoder.transform(data.x[:10])
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1, atol=1e-9)
    np.testing.assert_array_equal(v, encoder.transform(data.x[:10]))


def test_training_freezes_encoders_and_logs_history(encoder, data):
    lr = CounterfactualPromptLearner(encoder, TextEncoder(6, token_dim=D, embed_dim=D), n_epochs=4, batch_size=16)
    text_sum, enc_sum = lr.text_encoder.checksum(), encoder.checksum()
    x_cf = data.x[::-1].copy()
    lr.fit(data.x[:40], data.y[:40], X_cf=x_cf[:40])
    assert lr.text_encoder.checksum() == text_sum and encoder.checksum() == enc_sum
    assert [h["epoch"] for h in lr.history_] == [0, 1, 2, 3]
    assert all(abs(h["L_total"] - h["L_basic"] - h["L_cf"]) < 1e-12 for h in lr.history_)


def test_training_requires_counterfactuals(encoder, data):
    lr = CounterfactualPromptLearner(encoder, TextEncoder(6, token_dim=D, embed_dim=D), n_epochs=1)
    with pytest.raises(ContractViolation):
        lr.fit(data.x[:10], data.y[:10])
    with pytest.raises(ContractViolation):
        lr.fit(data.x[:10], data.y[:10], X_cf=data.x[:9])


def test_classify_singleton_and_scale_invariance(encoder, data):
    lr = make_learner(encoder)
    lr.classes_ = np.arange(6)
    c, p = lr.classify(data.x[0], [4])
    assert c == 4 and p.tolist() == [1.0]
    preds = lr.predict(data.x[:30], classes=[0, 1, 4, 5])
    lr.temperature = 3.0
    np.testing.assert_array_equal(preds, lr.predict(data.x[:30], classes=[0, 1, 4, 5]))
    with pytest.raises(ContractViolation):
        lr.classify(data.x[0], [])


def test_unseen_tokens_untouched_by_training(encoder, data):
    seen = np.isin(data.y, [0, 1, 2, 3])
    lr = CounterfactualPromptLearner(encoder, TextEncoder(6, token_dim=D, embed_dim=D), n_epochs=2, lambda_cf=0.0)
    before = lr.text_encoder.token_embeddings([4, 5]).copy()
    lr.fit(data.x[seen], data.y[seen])
    np.testing.assert_array_equal(lr.train_classes_, [0, 1, 2, 3])
    np.testing.assert_array_equal(lr.text_encoder.token_embeddings([4, 5]), before)
    assert set(lr.predict(data.x[~seen], classes=[4, 5])) <= {4, 5}
