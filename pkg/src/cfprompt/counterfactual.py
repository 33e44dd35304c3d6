"""Abduction -> action -> estimation, counterfactual label choice, quality metrics,
and the exact-inverse error-bound harness."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .diffusion import abduct, reverse, to_image_space, to_model_space
from .errors import ContractViolation, NumericError
from .scm import GLYPHS, AnalyticScm

STRATEGIES = ("similarity", "random")


def select_cf_label(probs, y, strategy="similarity", rng=None, candidates=None):
    """Pick the counterfactual class for one image.

    ``similarity`` takes the most probable class other than ``y`` (ties go
    to the lowest index); ``random`` draws uniformly from the other classes.
    ``candidates`` optionally restricts the choice to a subset of classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    K = len(probs)
    if K < 2:
        raise ContractViolation("need at least two classes to choose a counterfactual")
    if strategy not in STRATEGIES:
        raise ContractViolation(f"unknown strategy {strategy!r}")
    allowed = np.ones(K, dtype=bool) if candidates is None else np.isin(np.arange(K), list(candidates))
    allowed[int(y)] = False
    if not allowed.any():
        raise ContractViolation("no admissible counterfactual class")
    if strategy == "similarity":
        return int(np.argmax(np.where(allowed, probs, -np.inf)))
    rng = rng if rng is not None else np.random.default_rng()
    return int(rng.choice(np.flatnonzero(allowed)))


@dataclass
class CounterfactualPair:
    x: np.ndarray
    y: int
    y_cf: int
    x_cf: np.ndarray
    scale: float
    x_top: np.ndarray
    x_cf_true: np.ndarray | None = None
    trajectory: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.y == self.y_cf:
            raise ContractViolation("counterfactual label equals the factual label")


@dataclass
class CounterfactualBatch:
    """Column-wise counterfactual pairs; images in [0, 1], ``x_top`` in model space."""

    x: np.ndarray
    y: np.ndarray
    y_cf: np.ndarray
    x_cf: np.ndarray
    scale: float
    x_top: np.ndarray
    x_cf_true: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return CounterfactualPair(
            self.x[i], int(self.y[i]), int(self.y_cf[i]), self.x_cf[i], self.scale, self.x_top[i],
            None if self.x_cf_true is None else self.x_cf_true[i],
        )


class CounterfactualGenerator(BaseEstimator):
    """Counterfactual images from a fitted denoiser and anti-causal classifier.

    Both components are pretrained; ``fit`` only validates them. The
    counterfactual label is chosen once from clean-image probabilities and
    held fixed over all reverse steps.
    """

    def __init__(self, denoiser=None, classifier=None, scale=1.0, strategy="similarity",
                 candidates=None, random_state=0):
        self.denoiser = denoiser
        self.classifier = classifier
        self.scale = scale
        self.strategy = strategy
        self.candidates = candidates
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.denoiser is None or self.classifier is None:
            raise ContractViolation("a fitted denoiser and classifier are required")
        check_is_fitted(self.denoiser, "params_")
        check_is_fitted(self.classifier, "params_")
        if self.scale < 0:
            raise ContractViolation(f"guidance scale must be non-negative, got {self.scale}")
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.strategy!r}")
        self.schedule_ = self.denoiser.schedule_
        self.n_features_in_ = self.denoiser.n_features_in_
        return self

    def choose_labels(self, X, y):
        check_is_fitted(self, "schedule_")
        probs = self.classifier.predict_proba(X)
        rng = np.random.default_rng(self.random_state)
        return np.array([
            select_cf_label(p, yi, self.strategy, rng, self.candidates) for p, yi in zip(probs, y)
        ], dtype=np.int64)

    def generate(self, X, y, y_cf=None, keep_trajectory=False):
        check_is_fitted(self, "schedule_")
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        y_cf = self.choose_labels(X, y) if y_cf is None else np.asarray(y_cf, dtype=np.int64)
        if np.any(y_cf == y):
            raise ContractViolation("counterfactual labels must differ from factual labels")
        sch = self.schedule_
        try:
            x_top, _ = abduct(to_model_space(X), self.denoiser, sch)
        except NumericError as err:
            raise NumericError(f"abduction stage: {err}") from err

        def guidance(x_t, t):
            return self.classifier.log_prob_grad(x_t, t, y_cf)

        try:
            out = reverse(x_top, self.denoiser, sch, s=self.scale, guidance_fn=guidance,
                          return_trajectory=keep_trajectory)
        except NumericError as err:
            raise NumericError(f"estimation stage: {err}") from err
        x_rev, traj = out if keep_trajectory else (out, None)
        batch = CounterfactualBatch(X, y, y_cf, to_image_space(x_rev), float(self.scale), x_top)
        if keep_trajectory:
            batch.trajectory = traj
        return batch

    def transform(self, X, y):
        return self.generate(X, y).x_cf


def generate_counterfactual(x, y, model, classifier, schedule=None, s=1.0, strategy="similarity",
                            rng_seed=0, candidates=None, keep_trajectory=False):
    """Single-image convenience wrapper around :class:`CounterfactualGenerator`."""
    gen = CounterfactualGenerator(model, classifier, s, strategy, candidates, rng_seed).fit()
    if schedule is not None:
        gen.schedule_ = schedule
    batch = gen.generate(np.atleast_2d(x), [y], keep_trajectory=keep_trajectory)
    pair = batch[0]
    if keep_trajectory:
        pair.trajectory = [step[0] for step in batch.trajectory]
    return pair


@dataclass
class CfQualityReport:
    """Per-pair metrics. ``quality_score`` is a proxy for counterfactual quality; lower is better."""

    l2: float
    linf: float
    label_flipped: bool
    flip_confidence: float
    non_causal_leakage: float
    causal_distance: float
    quality_score: float

    def as_row(self):
        return asdict(self)


def quality_metrics(x, x_cf, y, y_cf, probs_cf, masks=GLYPHS):
    """Vectorised :class:`CfQualityReport` fields; returns a dict of arrays."""
    x = np.atleast_2d(x)
    x_cf = np.atleast_2d(x_cf)
    y = np.atleast_1d(y)
    y_cf = np.atleast_1d(y_cf)
    diff = x_cf - x
    m = x.shape[1]
    causal = masks[y] | masks[y_cf]
    l2 = np.sqrt((diff**2).sum(1))
    conf = probs_cf[np.arange(len(y)), y_cf]
    return {
        "l2": l2,
        "linf": np.abs(diff).max(1),
        "label_flipped": probs_cf.argmax(1) == y_cf,
        "flip_confidence": conf,
        "non_causal_leakage": np.sqrt((diff**2 * ~causal).sum(1)),
        "causal_distance": np.sqrt((diff**2 * causal).sum(1)),
        "quality_score": l2 / np.sqrt(m) + (1.0 - conf),
    }


def evaluate_quality(pair, classifier, masks=GLYPHS):
    probs = classifier.predict_proba(np.atleast_2d(pair.x_cf))
    row = quality_metrics(pair.x, pair.x_cf, pair.y, pair.y_cf, probs, masks)
    return CfQualityReport(**{k: (bool(v[0]) if k == "label_flipped" else float(v[0])) for k, v in row.items()})


def evaluate_batch(batch: CounterfactualBatch, classifier, masks=GLYPHS):
    return quality_metrics(batch.x, batch.x_cf, batch.y, batch.y_cf, classifier.predict_proba(batch.x_cf), masks)


# -- exact-inverse harness -----------------------------------------------------


@dataclass
class HarnessReport:
    max_reconstruction_error: float
    max_counterfactual_error: float
    trials: int
    delta: float
    leak: float
    cf_exceeds_reconstruction: int

    def as_row(self):
        return asdict(self)


def inverse_pair_harness(scm: AnalyticScm, delta=0.0, trials=1000, seed=0, leak=0.0):
    """Measure reconstruction and counterfactual errors of a distorted inverse pair.

    The abduction map is ``g(x) = g*(x) + delta * e + leak * y * e`` for a
    fixed unit vector ``e``; the reconstruction map removes only the label
    term, so ``leak > 0`` builds a latent that is correlated with ``y`` yet
    still reconstructs the factual exactly. Distances are Euclidean.
    """
    if delta < 0:
        raise ContractViolation("delta must be non-negative")
    rng = np.random.default_rng(seed)
    e = rng.normal(size=scm.dim)
    e /= np.linalg.norm(e)
    y, n, u, x = scm.sample(trials, rng)
    shift = rng.integers(1, scm.num_classes, size=trials)
    y_cf = (y + shift) % scm.num_classes

    latent = scm.g_star(x, y, n) + delta * e + leak * y[:, None] * e

    def h(l, yy):
        return scm.h_star(l - leak * yy[:, None] * e, yy, n)

    x_rec = h(latent, y)
    x_cf_hat = h(latent, y_cf)
    x_cf_true = scm.f(y_cf, n, u)
    rec_err = np.linalg.norm(x_rec - x, axis=1)
    cf_err = np.linalg.norm(x_cf_hat - x_cf_true, axis=1)
    return HarnessReport(
        max_reconstruction_error=float(rec_err.max()),
        max_counterfactual_error=float(cf_err.max()),
        trials=int(trials),
        delta=float(delta),
        leak=float(leak),
        cf_exceeds_reconstruction=int(np.sum(cf_err > rec_err + 1e-12)),
    )
