"""Synthetic structural causal model data.

Two tiers live here:

* an image SCM, ``x = f(y, n, u_x)``: a class glyph (causal pixels) drawn over
  a striped background whose orientation, period, phase and contrast form
  the non-causal factor ``n``, plus a small uniform texture from ``u_x``;
* an analytic vector SCM with closed-form abduction/reconstruction maps,
  used to check identifiability conditions and counterfactual error bounds
  exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ContractViolation

IMAGE_SIDE = 16
IMAGE_DIM = IMAGE_SIDE * IMAGE_SIDE
N_DIM = 4  # orientation, period, phase, contrast
GLYPH_LEVEL = 0.9
BACKGROUND_FLOOR = 0.1


def _glyph_masks(side=IMAGE_SIDE):
    r, c = np.mgrid[0:side, 0:side]
    rr = r - (side - 1) / 2
    cc = c - (side - 1) / 2
    rad = np.hypot(rr, cc)
    masks = [
        (np.abs(rr) <= 1) & (np.abs(cc) <= 5),  # horizontal bar
        ((np.abs(rr) <= 1) & (np.abs(cc) <= 5)) | ((np.abs(cc) <= 1) & (np.abs(rr) <= 5)),  # plus
        (rad >= 3.2) & (rad <= 5.2),  # ring
        (rr >= -4.5) & (rr <= 4.5) & (np.abs(cc) <= (rr + 4.5) * 0.6),  # triangle
        (np.maximum(np.abs(rr), np.abs(cc)) >= 4.5) & (np.maximum(np.abs(rr), np.abs(cc)) <= 5.5),  # square
        ((np.abs(rr - cc) <= 1.0) | (np.abs(rr + cc) <= 1.0)) & (np.maximum(np.abs(rr), np.abs(cc)) <= 5.5),  # X
        (np.abs(cc) <= 1) & (np.abs(rr) <= 5),  # vertical bar
        (np.abs(rr) + np.abs(cc) <= 5.5) & (np.abs(rr) + np.abs(cc) >= 3.5),  # diamond
    ]
    return np.stack([m.reshape(-1) for m in masks]).astype(bool)


GLYPH_NAMES = ("bar", "plus", "ring", "triangle", "square", "x", "vbar", "diamond")
GLYPHS = _glyph_masks()
MAX_CLASSES = len(GLYPHS)


@dataclass(frozen=True)
class ScmSpec:
    """Parameters of the image SCM.

    ``sigma_x`` is the texture amplitude; pixels receive
    ``sigma_x * (u_x - 0.5)``, which has zero mean.
    """

    num_classes: int = 6
    image_dim: int = IMAGE_DIM
    sigma_x: float = 0.02

    def __post_init__(self):
        if self.image_dim != IMAGE_DIM:
            raise ContractViolation(f"image_dim must be {IMAGE_DIM} (16x16), got {self.image_dim}")
        if not 3 <= self.num_classes <= MAX_CLASSES:
            raise ContractViolation(f"num_classes must be in [3, {MAX_CLASSES}], got {self.num_classes}")
        if not 0.0 <= self.sigma_x <= 0.2:
            raise ContractViolation(f"sigma_x must be in [0, 0.2], got {self.sigma_x}")

    @property
    def glyph_masks(self):
        return GLYPHS[: self.num_classes]


@dataclass
class ScmSample:
    u_x: np.ndarray
    u_y: float
    u_n: np.ndarray
    y: int
    n: np.ndarray
    x: np.ndarray


@dataclass
class ScmDataset:
    """Column-wise batch of SCM draws. ``u_y``/``u_n`` are absent after a file round-trip."""

    y: np.ndarray
    n: np.ndarray
    u_x: np.ndarray
    x: np.ndarray
    u_y: np.ndarray | None = None
    u_n: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return ScmSample(
            u_x=self.u_x[i],
            u_y=float(self.u_y[i]) if self.u_y is not None else float("nan"),
            u_n=self.u_n[i] if self.u_n is not None else np.full(N_DIM, np.nan),
            y=int(self.y[i]),
            n=self.n[i],
            x=self.x[i],
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return ScmDataset(
            self.y[idx], self.n[idx], self.u_x[idx], self.x[idx],
            None if self.u_y is None else self.u_y[idx],
            None if self.u_n is None else self.u_n[idx],
        )

    @staticmethod
    def concatenate(parts):
        has_u = all(p.u_y is not None for p in parts)
        return ScmDataset(
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.n for p in parts]),
            np.concatenate([p.u_x for p in parts]),
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.u_y for p in parts]) if has_u else None,
            np.concatenate([p.u_n for p in parts]) if has_u else None,
        )


def style_from_noise(u_n):
    """Map ``u_n`` in [0,1]^4 to (angle, period, phase, contrast)."""
    u_n = np.asarray(u_n, dtype=float)
    angle = np.pi * u_n[..., 0]
    period = 3.0 + 5.0 * u_n[..., 1]
    phase = 2.0 * np.pi * u_n[..., 2]
    contrast = 0.15 + 0.3 * u_n[..., 3]
    return np.stack([angle, period, phase, contrast], axis=-1)


_ROWS, _COLS = (a.reshape(-1).astype(float) for a in np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE])


def background(n):
    """Striped background for style vector(s) ``n``; values in [0.1, 0.55]."""
    n = np.atleast_2d(n)
    angle, period, phase, contrast = (n[:, i : i + 1] for i in range(N_DIM))
    proj = _COLS[None, :] * np.cos(angle) + _ROWS[None, :] * np.sin(angle)
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * proj / period + phase)
    return BACKGROUND_FLOOR + contrast * wave


def render_image(y, n, u_x, sigma_x=0.02, num_classes=MAX_CLASSES):
    """Render ``x = f(y, n, u_x)``; vectorised over leading batch dimension.

    Glyph pixels are set to a fixed level, the rest show the background, and
    ``sigma_x * (u_x - 0.5)`` is added everywhere before clamping to [0, 1].
    """
    y_arr = np.atleast_1d(np.asarray(y))
    if np.any((y_arr < 0) | (y_arr >= num_classes)) or not np.issubdtype(y_arr.dtype, np.integer):
        raise ContractViolation(f"unknown class id(s) {y_arr[(y_arr < 0) | (y_arr >= num_classes)]}")
    single = np.ndim(y) == 0
    n = np.atleast_2d(n)
    u_x = np.atleast_2d(u_x)
    mask = GLYPHS[y_arr]
    img = np.where(mask, GLYPH_LEVEL, background(n))
    img = np.clip(img + sigma_x * (u_x - 0.5), 0.0, 1.0)
    return img[0] if single else img


def _draw(spec: ScmSpec, rng, count, classes=None):
    u_y = rng.uniform(size=count)
    if classes is not None:
        # condition u_y on the requested class: y = floor(K u_y)
        u_y = (np.asarray(classes) + u_y) / spec.num_classes
    u_n = rng.uniform(size=(count, N_DIM))
    u_x = rng.uniform(size=(count, spec.image_dim))
    y = np.minimum((u_y * spec.num_classes).astype(np.int64), spec.num_classes - 1)
    n = style_from_noise(u_n)
    x = render_image(y, n, u_x, spec.sigma_x, spec.num_classes)
    return ScmDataset(y=y, n=n, u_x=u_x, x=np.atleast_2d(x), u_y=u_y, u_n=u_n)


def sample_scm(spec: ScmSpec, seed) -> ScmSample:
    """One draw from the image SCM, fully determined by ``seed``."""
    return _draw(spec, np.random.default_rng(seed), 1)[0]


def sample_dataset(spec: ScmSpec, count, seed) -> ScmDataset:
    return _draw(spec, np.random.default_rng(seed), count)


def sample_class_conditional(spec: ScmSpec, classes, per_class, seed) -> ScmDataset:
    """``per_class`` draws for each class in ``classes``, with ``u_y`` drawn inside each class's interval."""
    labels = np.repeat(np.asarray(list(classes), dtype=np.int64), per_class)
    return _draw(spec, np.random.default_rng(seed), len(labels), classes=labels)


def true_counterfactual(sample, y_cf, spec: ScmSpec | None = None):
    """Ground-truth ``f(y_cf, n, u_x)`` from the stored exogenous values."""
    spec = spec or ScmSpec()
    if int(y_cf) == int(sample.y):
        raise ContractViolation("counterfactual label must differ from the factual label")
    return render_image(int(y_cf), sample.n, sample.u_x, spec.sigma_x, spec.num_classes)


def true_counterfactuals(data: ScmDataset, y_cf, spec: ScmSpec):
    y_cf = np.asarray(y_cf, dtype=np.int64)
    if np.any(y_cf == data.y):
        raise ContractViolation("counterfactual labels must differ from the factual labels")
    return render_image(y_cf, data.n, data.u_x, spec.sigma_x, spec.num_classes)


def glyph_union_mask(y, y_cf):
    """Pixels inside either glyph; everything else is non-causal."""
    return GLYPHS[np.asarray(y)] | GLYPHS[np.asarray(y_cf)]


@dataclass
class DatasetSplit:
    seen: tuple
    unseen: tuple
    shots: int
    train: ScmDataset
    test: ScmDataset
    seed: int = 0

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ContractViolation("seen and unseen class lists overlap")

    def test_subset(self, classes):
        return self.test.subset(np.flatnonzero(np.isin(self.test.y, list(classes))))


def make_splits(spec: ScmSpec, seen, unseen, shots, seed, test_per_class=50) -> DatasetSplit:
    """Few-shot train set over ``seen`` classes; test set over all listed classes."""
    seen, unseen = tuple(int(c) for c in seen), tuple(int(c) for c in unseen)
    if set(seen) & set(unseen):
        raise ContractViolation(f"seen {seen} and unseen {unseen} overlap")
    if shots < 1:
        raise ContractViolation(f"shots must be >= 1, got {shots}")
    for c in seen + unseen:
        if not 0 <= c < spec.num_classes:
            raise ContractViolation(f"class {c} outside [0, {spec.num_classes})")
    ss = np.random.SeedSequence(seed)
    train_seed, test_seed = ss.spawn(2)
    train = sample_class_conditional(spec, seen, shots, train_seed)
    test = sample_class_conditional(spec, seen + unseen, test_per_class, test_seed)
    return DatasetSplit(seen, unseen, int(shots), train, test, seed)


# -- analytic vector SCM -------------------------------------------------------

FAMILIES = ("additive-orthogonal", "post-nonlinear")


def _bounded_rotation(m, rng, max_angle):
    """Orthogonal matrix whose eigen-angles are all below ``max_angle``."""
    G = rng.normal(size=(m, m))
    S = G - G.T
    S *= max_angle / np.abs(np.linalg.eigvals(S)).max()
    return expm(S)


@dataclass
class AnalyticScm:
    """``x = phi(c(y, n) A u + b(y, n))`` with ``phi`` the identity or a strictly increasing map.

    The exact abduction ``g*`` returns the latent ``l = Q u`` (``Q`` a fixed
    rotation of latent space) and ``h*`` re-renders from it; both use the
    observed parents ``(y, n)`` as abduction evidence.
    """

    dim: int = 3
    family: str = "additive-orthogonal"
    num_classes: int = 3
    unit_scale: bool = True
    seed: int = 0
    A: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 3:
            raise ContractViolation(f"analytic SCM needs dim >= 3, got {self.dim}")
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        rng = np.random.default_rng(self.seed)
        m = self.dim
        self.A = _bounded_rotation(m, rng, np.pi / 6)
        self.Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
        self._B = rng.normal(scale=0.5, size=(m, m))
        self._mu = rng.normal(size=(self.num_classes, m))
        self._w = rng.normal(size=m) / np.sqrt(m)

    # structural pieces
    def scale(self, y, n):
        y = np.asarray(y, dtype=float)
        if self.unit_scale:
            return np.ones(np.shape(y))
        z = np.asarray(n) @ self._w + 0.3 * y
        return 0.75 + 0.5 / (1.0 + np.exp(-z))

    def offset(self, y, n):
        return np.asarray(n) @ self._B.T + self._mu[np.asarray(y)]

    def _phi(self, z):
        return z if self.family == "additive-orthogonal" else z + 0.1 * np.tanh(z)

    def _phi_prime(self, z):
        return np.ones_like(z) if self.family == "additive-orthogonal" else 1.0 + 0.1 / np.cosh(z) ** 2

    def _phi_inv(self, x):
        if self.family == "additive-orthogonal":
            return x
        z = np.array(x, dtype=float)
        for _ in range(50):
            step = (self._phi(z) - x) / self._phi_prime(z)
            z = z - step
            if np.max(np.abs(step)) < 1e-15:
                break
        return z

    def f(self, y, n, u):
        c = np.asarray(self.scale(y, n))[..., None]
        return self._phi(c * (np.asarray(u) @ self.A.T) + self.offset(y, n))

    def g_star(self, x, y, n):
        c = np.asarray(self.scale(y, n))[..., None]
        u = ((self._phi_inv(x) - self.offset(y, n)) / c) @ self.A
        return u @ self.Q.T

    def h_star(self, latent, y, n):
        return self.f(y, n, np.asarray(latent) @ self.Q)

    def jacobian_f(self, y, n, u):
        """Analytic d f / d u_x at a single point."""
        c = float(self.scale(y, n))
        z = c * (self.A @ u) + self.offset(y, n)
        return self._phi_prime(z)[:, None] * c * self.A

    def sample(self, count, rng):
        y = rng.integers(0, self.num_classes, size=count)
        n = rng.normal(size=(count, self.dim))
        u = rng.uniform(size=(count, self.dim))
        return y, n, u, self.f(y, n, u)


def analytic_scm_sample(dim, family, seed, num_classes=3, unit_scale=False):
    """Draw one sample from an analytic SCM; returns ``(sample, g*, h*)``.

    ``g*(x, y, n)`` and ``h*(l, y, n)`` are exact inverses of each other on
    the SCM's range.
    """
    scm = AnalyticScm(dim=dim, family=family, num_classes=num_classes, unit_scale=unit_scale, seed=seed)
    rng = np.random.default_rng(seed)
    y, n, u, x = scm.sample(1, rng)
    sample = ScmSample(u_x=u[0], u_y=float("nan"), u_n=n[0], y=int(y[0]), n=n[0], x=x[0])
    return sample, scm.g_star, scm.h_star
