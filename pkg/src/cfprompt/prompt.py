"""Instance-conditioned prompt learning with counterfactual hard negatives.

The frozen "text side" is a :class:`TextEncoder`: one random token per class
and a fixed linear map from ``[context_1 .. context_L, class token]`` to the
joint embedding space. The frozen image side is an :class:`ImageEncoder`.
Only the context vectors and the meta network are trained.
"""
from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ContractViolation
from .numerics import (
    ParamSet,
    as_tensor,
    concat,
    forward_and_grad,
    init_mlp,
    l2_normalize,
    log_softmax,
    logsumexp,
    mlp_apply,
    optimizer_step,
    softmax_np,
)

MAX_PROMPT_LENGTH = 16
TEMPLATE_LENGTH = 4


def checksum(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


class TextEncoder:
    """Frozen random stand-in for a pretrained text encoder.

    ``encode(context, classes)`` returns unit vectors
    ``normalize(sum_k context_k @ P[k] + token_c @ P_cls)``. ``template`` is a
    fixed length-4 hand-crafted context used for zero-shot class anchors.
    """

    def __init__(self, num_classes, token_dim=32, embed_dim=32, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        self.seed = seed
        scale = 1.0 / np.sqrt(token_dim * (TEMPLATE_LENGTH + 1))
        self._set_arrays(
            rng.normal(size=(num_classes, token_dim)),
            rng.normal(scale=scale, size=(MAX_PROMPT_LENGTH, token_dim, embed_dim)),
            rng.normal(scale=scale, size=(token_dim, embed_dim)),
            rng.normal(size=(TEMPLATE_LENGTH, token_dim)),
        )

    def _set_arrays(self, class_tokens, position_proj, class_proj, template):
        self.class_tokens = np.array(class_tokens, dtype=np.float64)
        self.position_proj = np.array(position_proj, dtype=np.float64)
        self.class_proj = np.array(class_proj, dtype=np.float64)
        self.template = np.array(template, dtype=np.float64)
        self.num_classes, self.token_dim = self.class_tokens.shape
        self.embed_dim = self.class_proj.shape[1]
        if self.position_proj.shape != (MAX_PROMPT_LENGTH, self.token_dim, self.embed_dim):
            raise ContractViolation("position projections do not match token/embedding sizes")
        for arr in (self.class_tokens, self.position_proj, self.class_proj, self.template):
            arr.setflags(write=False)
        toks = self.class_tokens @ self.class_proj
        if np.linalg.matrix_rank(toks) < min(self.num_classes, self.embed_dim):
            raise ContractViolation("frozen class tokens are not distinct after projection")

    def arrays(self):
        return {"class_tokens": self.class_tokens, "position_proj": self.position_proj,
                "class_proj": self.class_proj, "template": self.template}

    @classmethod
    def from_arrays(cls, class_tokens, position_proj, class_proj, template, seed=-1):
        obj = cls.__new__(cls)
        obj.seed = seed
        obj._set_arrays(class_tokens, position_proj, class_proj, template)
        return obj

    def checksum(self):
        return checksum(self.class_tokens, self.position_proj, self.class_proj, self.template)

    def token_embeddings(self, classes=None):
        classes = np.arange(self.num_classes) if classes is None else np.asarray(classes)
        return self.class_tokens[classes] @ self.class_proj

    def context_projection(self, length):
        if not 1 <= length <= MAX_PROMPT_LENGTH:
            raise ContractViolation(f"prompt length must be in [1, {MAX_PROMPT_LENGTH}]")
        return self.position_proj[:length]

    def anchors(self, classes=None):
        """Zero-shot class embeddings from the hand-crafted template."""
        ctx = np.einsum("kt,ktd->d", self.template, self.context_projection(TEMPLATE_LENGTH))
        z = ctx[None, :] + self.token_embeddings(classes)
        return z / np.linalg.norm(z, axis=1, keepdims=True)


class ImageEncoder(TransformerMixin, BaseEstimator):
    """MLP image encoder with unit-norm outputs.

    ``fit`` trains the MLP through a linear classification head on the
    normalised embedding; the head is discarded afterwards and the encoder
    is treated as frozen.
    """

    def __init__(self, embed_dim=32, hidden=(128,), activation="silu", n_steps=1500,
                 batch_size=64, learning_rate=1e-3, temperature=0.07, random_state=0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.activation = activation
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        _, y = np.unique(y, return_inverse=True)
        n_cls = int(y.max()) + 1
        self.n_features_in_ = X.shape[1]
        self.arch_ = [X.shape[1], *self.hidden, self.embed_dim]
        rng = np.random.default_rng(self.random_state)
        head = {"head": rng.normal(scale=1.0 / np.sqrt(self.embed_dim), size=(self.embed_dim, n_cls))}
        state = ParamSet({**init_mlp(self.arch_, rng), **head})
        self.loss_curve_ = []

        def loss_fn(p, xb, yb):
            v = l2_normalize(mlp_apply(p, xb, self.arch_, self.activation), axis=1)
            logp = log_softmax(v @ p["head"] * (1.0 / self.temperature), axis=1)
            return -logp[np.arange(len(yb)), yb].mean()

        for _ in range(self.n_steps):
            idx = rng.integers(0, len(X), size=self.batch_size)
            loss, grads = forward_and_grad(loss_fn, state.values, X[idx], y[idx])
            optimizer_step(state, grads, lr=self.learning_rate)
            self.loss_curve_.append(loss)
        state.values.pop("head")
        self.params_ = ParamSet(state.values)
        return self

    def embed(self, X):
        """Graph node for the embedding (parameters held constant)."""
        check_is_fitted(self, "params_")
        return l2_normalize(mlp_apply(self.params_.values, as_tensor(X), self.arch_, self.activation), axis=1)

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return self.embed(X).data

    def checksum(self):
        check_is_fitted(self, "params_")
        return checksum(*(self.params_.values[k] for k in sorted(self.params_.values)))


# -- prompt embeddings and losses -------------------------------------------------


def prompt_embeddings(params, text: TextEncoder, v, classes, length, meta_arch, activation="silu"):
    """``g(w^c(v_i))`` for every row of ``v`` and every class: shape ``(B, |C|, d)``.

    ``params`` holds ``ctx`` (``length x token_dim``) and the meta network;
    the meta offset is added to every context vector.
    """
    v = as_tensor(v)
    proj = text.context_projection(length)
    ctx_part = as_tensor(params["ctx"]).reshape(1, -1) @ proj.reshape(-1, text.embed_dim)  # (1, d)
    offset = mlp_apply(params, v, meta_arch, activation, prefix="meta_")  # (B, token_dim)
    meta_part = offset @ proj.sum(axis=0)  # (B, d)
    base = (ctx_part + meta_part).reshape(v.shape[0], 1, text.embed_dim)
    toks = text.token_embeddings(classes)[None, :, :]
    return l2_normalize(base + toks, axis=2)


def _logits(params, text, v, classes, length, meta_arch, tau, activation="silu"):
    v = as_tensor(v)
    g = prompt_embeddings(params, text, v, classes, length, meta_arch, activation)
    return (g * v.reshape(v.shape[0], 1, v.shape[1])).sum(axis=2) * (1.0 / tau), g


def loss_basic_graph(params, text, v, y, classes, length, meta_arch, tau, activation="silu"):
    classes = np.asarray(classes)
    if len(classes) == 0:
        raise ContractViolation("class set is empty")
    lookup = {int(c): j for j, c in enumerate(classes)}
    if len(lookup) != len(classes):
        raise ContractViolation("class set contains duplicates")
    try:
        col = np.array([lookup[int(c)] for c in np.atleast_1d(y)], dtype=np.int64)
    except KeyError as err:
        raise ContractViolation(f"batch label {err.args[0]} is not in the class set") from None
    logits, _ = _logits(params, text, v, classes, length, meta_arch, tau, activation)
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(y)), col].mean()


def loss_cf_graph(params, text, v, y, v_cf, length, meta_arch, tau, activation="silu"):
    if np.shape(v_cf) != np.shape(v):
        raise ContractViolation("counterfactual embeddings must pair index-wise with factual ones")
    v = as_tensor(v)
    v_cf = as_tensor(v_cf)
    B = v.shape[0]
    g = prompt_embeddings(params, text, v, np.asarray(y), length, meta_arch, activation)
    rows = np.arange(B)
    g_own = g[rows, rows, :]  # prompt of each image's own class
    pos = (v * g_own).sum(axis=1) * (1.0 / tau)
    neg = (v_cf * g_own).sum(axis=1) * (1.0 / tau)
    both = concat([pos.reshape(B, 1), neg.reshape(B, 1)], axis=1)
    return (logsumexp(both, axis=1) - pos).mean()


def loss_cf_from_scores(pos, neg, tau=1.0):
    """Per-pair counterfactual loss from raw dot products ``v.g`` and ``v_cf.g``."""
    a, b = np.asarray(pos) / tau, np.asarray(neg) / tau
    return np.logaddexp(a, b) - a


def total_loss_graph(params, text, v, y, v_cf, classes, length, meta_arch, tau, lam, activation="silu"):
    if lam < 0:
        raise ContractViolation(f"lambda must be non-negative, got {lam}")
    basic = loss_basic_graph(params, text, v, y, classes, length, meta_arch, tau, activation)
    if lam == 0:
        return basic
    return basic + lam * loss_cf_graph(params, text, v, y, v_cf, length, meta_arch, tau, activation)


class CounterfactualPromptLearner(ClassifierMixin, BaseEstimator):
    """Learns context vectors and a meta network from factual/counterfactual pairs.

    ``fit(X, y, X_cf=...)`` minimises ``L_basic + lambda_cf * L_cf`` over the
    classes present in ``y``; ``predict`` scores any class set, including
    classes never seen during training.
    """

    def __init__(self, encoder=None, text_encoder=None, prompt_length=4, temperature=0.07,
                 lambda_cf=1.0, n_epochs=600, batch_size=32, learning_rate=2e-3,
                 activation="silu", classes=None, random_state=0):
        self.encoder = encoder
        self.text_encoder = text_encoder
        self.prompt_length = prompt_length
        self.temperature = temperature
        self.lambda_cf = lambda_cf
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.activation = activation
        self.classes = classes
        self.random_state = random_state

    # state ------------------------------------------------------------------
    def init_state(self):
        te = self.text_encoder
        if te is None or self.encoder is None:
            raise ContractViolation("prompt learner needs a fitted encoder and a text encoder")
        if self.temperature <= 0:
            raise ContractViolation("temperature must be positive")
        rng = np.random.default_rng(self.random_state)
        L = int(self.prompt_length)
        ctx = rng.normal(scale=0.02, size=(L, te.token_dim))
        k = min(L, TEMPLATE_LENGTH)
        ctx[:k] = te.template[:k]
        d = te.embed_dim
        self.meta_arch_ = [d, max(d // 2, 1), te.token_dim]
        params = {"ctx": ctx, **init_mlp(self.meta_arch_, rng, prefix="meta_", zero_last=True)}
        self.params_ = ParamSet(params)
        self.frozen_checksum_ = self._frozen_checksum()
        self.history_ = []
        self._rng = rng
        return self

    def _frozen_checksum(self):
        return self.text_encoder.checksum() + self.encoder.checksum()

    def _kw(self):
        return dict(text=self.text_encoder, length=int(self.prompt_length), meta_arch=self.meta_arch_,
                    tau=self.temperature, activation=self.activation)

    # losses on raw embeddings -------------------------------------------------
    def loss_basic(self, v, y, classes, params=None):
        p = self.params_.values if params is None else params
        return float(loss_basic_graph(p, v=v, y=np.asarray(y), classes=classes, **self._kw()).data)

    def loss_cf(self, v, y, v_cf, params=None):
        p = self.params_.values if params is None else params
        return float(loss_cf_graph(p, v=v, y=np.asarray(y), v_cf=v_cf, **self._kw()).data)

    def total_loss(self, v, y, v_cf, classes, lam, params=None):
        p = self.params_.values if params is None else params
        return float(total_loss_graph(p, v=v, y=np.asarray(y), v_cf=v_cf, classes=classes, lam=lam,
                                      **self._kw()).data)

    def total_loss_and_grad(self, v, y, v_cf, classes, lam, params=None):
        p = self.params_.values if params is None else params
        kw = self._kw()
        return forward_and_grad(
            lambda q: total_loss_graph(q, v=v, y=np.asarray(y), v_cf=v_cf, classes=classes, lam=lam, **kw), p
        )

    def prompt_embed(self, c, v):
        """``g(w^c(v))`` for a single class and one or more image embeddings."""
        check_is_fitted(self, "params_")
        if not 0 <= int(c) < self.text_encoder.num_classes:
            raise ContractViolation(f"unknown class {c}")
        g = prompt_embeddings(self.params_.values, self.text_encoder, np.atleast_2d(v), [int(c)],
                              int(self.prompt_length), self.meta_arch_, self.activation)
        return g.data[:, 0, :]

    # estimator API ----------------------------------------------------------------
    def fit(self, X, y, X_cf=None, callback=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if self.lambda_cf < 0:
            raise ContractViolation(f"lambda must be non-negative, got {self.lambda_cf}")
        if X_cf is None:
            if self.lambda_cf > 0:
                raise ContractViolation("a counterfactual image is required for every training image")
            X_cf = X
        X_cf = check_array(X_cf, dtype=np.float64)
        if X_cf.shape != X.shape:
            raise ContractViolation("missing counterfactual for some training images")
        self.init_state()
        train_classes = np.unique(y) if self.classes is None else np.asarray(sorted(self.classes))
        self.train_classes_ = train_classes
        self.classes_ = np.arange(self.text_encoder.num_classes)
        v = self.encoder.transform(X)
        v_cf = self.encoder.transform(X_cf)
        n = len(y)
        bs = min(self.batch_size, n)
        for epoch in range(self.n_epochs):
            order = self._rng.permutation(n)
            totals = []
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                loss, grads = self.total_loss_and_grad(v[idx], y[idx], v_cf[idx], train_classes, self.lambda_cf)
                optimizer_step(self.params_, grads, lr=self.learning_rate)
                totals.append((loss, len(idx)))
            row = {
                "epoch": epoch,
                "L_basic": self.loss_basic(v, y, train_classes),
                "L_cf": self.loss_cf(v, y, v_cf),
                "L_total_batches": float(sum(l * k for l, k in totals) / n),
            }
            row["L_total"] = row["L_basic"] + self.lambda_cf * row["L_cf"]
            if callback is not None:
                row.update(callback(self))
            self.history_.append(row)
        if self._frozen_checksum() != self.frozen_checksum_:
            raise ContractViolation("frozen components changed during prompt training")
        return self

    def decision_function(self, X, classes=None):
        check_is_fitted(self, "params_")
        classes = self.classes_ if classes is None else np.asarray(classes)
        v = self.encoder.transform(X)
        logits, _ = _logits(self.params_.values, self.text_encoder, v, classes, int(self.prompt_length),
                            self.meta_arch_, self.temperature, self.activation)
        return logits.data

    def predict_proba(self, X, classes=None):
        return softmax_np(self.decision_function(X, classes), axis=1)

    def predict(self, X, classes=None):
        classes = self.classes_ if classes is None else np.asarray(classes)
        return classes[np.argmax(self.decision_function(X, classes), axis=1)]

    def score(self, X, y, classes=None, sample_weight=None):
        return float(np.mean(self.predict(X, classes) == np.asarray(y)))

    def classify(self, x, classes):
        """``(predicted class, probability vector over classes)`` for one image."""
        classes = np.asarray(classes)
        if len(classes) == 0:
            raise ContractViolation("class set is empty")
        p = self.predict_proba(np.atleast_2d(x), classes)[0]
        return int(classes[np.argmax(p)]), p

    def cf_margin(self, X, y, X_cf):
        """``mean(v . g(w^y(v))) - mean(v_cf . g(w^y(v)))`` over factual/counterfactual pairs."""
        check_is_fitted(self, "params_")
        y = np.asarray(y)
        v, v_cf = self.encoder.transform(X), self.encoder.transform(X_cf)
        g = np.empty_like(v)
        for c in np.unique(y):
            rows = y == c
            g[rows] = self.prompt_embed(c, v[rows])
        return float(np.mean((v * g).sum(1)) - np.mean((v_cf * g).sum(1)))

    def unfitted_copy(self):
        """Learner with initial (untrained) prompts: the zero-shot baseline."""
        clone = CounterfactualPromptLearner(**self.get_params(deep=False))
        clone.init_state()
        clone.classes_ = np.arange(self.text_encoder.num_classes)
        return clone
