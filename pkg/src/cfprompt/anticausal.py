"""Timestep-conditioned anti-causal classifier ``p_phi(y | x_t, t)``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .diffusion import make_schedule, to_model_space
from .errors import ContractViolation
from .numerics import (
    ParamSet,
    Tensor,
    concat,
    forward_and_grad,
    init_mlp,
    log_softmax,
    mlp_apply,
    optimizer_step,
    softmax_np,
    timestep_embedding,
)


def classifier_logits(params, x_t, temb, arch, activation="silu"):
    return mlp_apply(params, concat([x_t, temb], axis=1), arch, activation)


def classifier_loss(params, x_t, t, labels, num_classes, arch, time_dim, activation="silu", smoothing=0.01):
    """Label-smoothed cross-entropy on (already noised) model-space inputs."""
    temb = timestep_embedding(t, time_dim)
    logp = log_softmax(classifier_logits(params, Tensor(x_t), Tensor(temb), arch, activation), axis=1)
    target = np.full((len(labels), num_classes), smoothing / num_classes)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -(logp * target).sum() * (1.0 / len(labels))


def noise_images(x0, t, schedule, rng):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; level 0 is left clean."""
    ab = np.where(t == 0, 1.0, schedule.alpha_bars[t])[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.normal(size=x0.shape)


class AntiCausalClassifier(ClassifierMixin, BaseEstimator):
    """MLP on ``(x_t, timestep embedding)`` producing class logits.

    Trained with noise drawn from the diffusion schedule so guidance
    gradients are in-distribution at every reverse step. ``fit``,
    ``predict`` and ``predict_proba`` take clean images in [0, 1];
    ``predict_proba_t`` and ``log_prob_grad`` take model-space ``x_t``.
    """

    def __init__(
        self,
        num_classes=None,
        hidden=(256, 256),
        time_dim=32,
        activation="silu",
        n_steps=2000,
        batch_size=64,
        learning_rate=1e-3,
        label_smoothing=0.01,
        schedule=None,
        random_state=0,
    ):
        self.num_classes = num_classes
        self.hidden = hidden
        self.time_dim = time_dim
        self.activation = activation
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_smoothing = label_smoothing
        self.schedule = schedule
        self.random_state = random_state

    def _init(self, dim, num_classes):
        self.schedule_ = self.schedule if self.schedule is not None else make_schedule()
        self.n_features_in_ = dim
        self.classes_ = np.arange(num_classes)
        self.arch_ = [dim + self.time_dim, *self.hidden, num_classes]
        self._rng = np.random.default_rng(self.random_state)
        self.params_ = ParamSet(init_mlp(self.arch_, self._rng))
        self.loss_curve_ = []

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        K = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= K:
            raise ContractViolation(f"labels must lie in [0, {K})")
        self._init(X.shape[1], K)
        x0 = to_model_space(X)
        sch = self.schedule_
        for _ in range(self.n_steps):
            idx = self._rng.integers(0, len(x0), size=self.batch_size)
            t = self._rng.integers(0, sch.T, size=self.batch_size)
            x_t = noise_images(x0[idx], t, sch, self._rng)
            loss, grads = forward_and_grad(
                classifier_loss, self.params_.values, x_t, t, y[idx], K,
                self.arch_, self.time_dim, self.activation, self.label_smoothing,
            )
            optimizer_step(self.params_, grads, lr=self.learning_rate)
            self.loss_curve_.append(loss)
        return self

    def _logits(self, x_t, t):
        check_is_fitted(self, "params_")
        x_t = np.atleast_2d(x_t)
        t = np.broadcast_to(np.asarray(t), (len(x_t),))
        temb = timestep_embedding(t, self.time_dim)
        return classifier_logits(self.params_.values, Tensor(x_t), Tensor(temb), self.arch_, self.activation).data

    def predict_proba_t(self, x_t, t):
        return softmax_np(self._logits(x_t, t), axis=1)

    def predict_proba(self, X):
        X = check_array(X, dtype=np.float64)
        return self.predict_proba_t(to_model_space(X), 0)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def log_prob_grad(self, x_t, t, y_target):
        """Gradient of ``log p(y_target | x_t, t)`` w.r.t. ``x_t``, row by row."""
        check_is_fitted(self, "params_")
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        y_target = np.broadcast_to(np.asarray(y_target, dtype=np.int64), (len(x_t),))
        if np.any((y_target < 0) | (y_target >= len(self.classes_))):
            raise ContractViolation("target class outside [0, K)")
        temb = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (len(x_t),)), self.time_dim))
        rows = np.arange(len(x_t))

        def objective(p):
            logits = classifier_logits(self.params_.values, p["x"], temb, self.arch_, self.activation)
            return log_softmax(logits, axis=1)[rows, y_target].sum()

        _, grads = forward_and_grad(objective, {"x": x_t})
        return grads["x"]

    def accuracy_at(self, X, y, t, rng=None):
        """Accuracy on images noised to level ``t``."""
        rng = rng if rng is not None else np.random.default_rng(0)
        x0 = to_model_space(check_array(X, dtype=np.float64))
        tt = np.full(len(x0), t)
        x_t = noise_images(x0, tt, self.schedule_, rng)
        return float(np.mean(np.argmax(self._logits(x_t, tt), axis=1) == np.asarray(y)))


def predict_probs(classifier: AntiCausalClassifier, x, t):
    """Class probabilities for model-space ``x`` at level ``t``."""
    return classifier.predict_proba_t(x, t)


def log_prob_grad(classifier: AntiCausalClassifier, x, t, y_target):
    return classifier.log_prob_grad(x, t, y_target)
