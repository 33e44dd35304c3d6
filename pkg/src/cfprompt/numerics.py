"""Dense float64 tensors with reverse-mode gradients, Adam, and MLP helpers.

Everything trainable in the package (denoiser, anti-causal classifier, image
encoder, prompt learner) is expressed as a scalar function of named numpy
arrays and differentiated with :func:`forward_and_grad`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

DTYPE = np.float64

# Largest |x| the activations are documented for; beyond it exp() may overflow.
MAGNITUDE_BOUND = 1e6


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in a reverse-mode computation graph.

    ``data`` is always a float64 ndarray. Nodes created from inputs that do
    not require gradients carry no backward closure, so inference costs the
    same as plain numpy.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    # -- construction -----------------------------------------------------
    @staticmethod
    def _result(data, parents, backward, op):
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by node '{op}'")
        out = Tensor(data, name=op)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._result(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise ContractViolation("only scalar exponents are supported")
        a = self

        def backward(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._result(a.data**exponent, (a,), backward, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ContractViolation("matmul expects 2-d operands")

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")

    def __getitem__(self, index):
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._result(a.data[index], (a,), backward, "getitem")

    # -- reductions / reshaping ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return Tensor._result(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    @property
    def T(self):
        a = self
        return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")

    # -- backward -----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar output, got shape {self.shape}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions -----------------------------------------------------


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return Tensor._result(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _stable_sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x):
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = x.data * s
    return Tensor._result(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(x):
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return Tensor._result(out, (x,), lambda g: (g * _stable_sigmoid(x.data),), "softplus")


ACTIVATIONS = {"silu": silu, "tanh": tanh, "softplus": softplus, "sigmoid": sigmoid}


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, tuple(tensors), backward, "concat")


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + m
    soft = shifted / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return Tensor._result(out, (x,), backward, "logsumexp")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


def l2_normalize(x, axis=-1):
    x = as_tensor(x)
    return x / sqrt((x * x).sum(axis=axis, keepdims=True))


def softmax_np(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- gradients -----------------------------------------------------------------


def forward_and_grad(fn: Callable[..., Tensor], params: Mapping[str, np.ndarray], *inputs, **kwargs):
    """Evaluate ``fn(tensors, *inputs)`` and its gradient w.r.t. every entry of ``params``.

    ``fn`` receives a dict of gradient-tracking :class:`Tensor` objects keyed
    like ``params`` and must return a scalar tensor. Returns
    ``(loss, grads)`` where ``grads`` mirrors ``params``.
    """
    tracked = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = fn(tracked, *inputs, **kwargs)
    if not isinstance(out, Tensor):
        out = as_tensor(out)
    if out.data.size != 1:
        raise ContractViolation(f"computation must return a scalar, got shape {out.shape}")
    out.backward()
    grads = {
        k: (t.grad.reshape(np.shape(params[k])) if t.grad is not None else np.zeros_like(t.data))
        for k, t in tracked.items()
    }
    return float(out.data), grads


# -- parameters and optimizer -------------------------------------------------


@dataclass
class ParamSet:
    """Named float64 parameters with Adam moment buffers and a step counter."""

    values: dict
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = {k: np.asarray(a, dtype=DTYPE) for k, a in self.values.items()}
        for k, a in self.values.items():
            self.m.setdefault(k, np.zeros_like(a))
            self.v.setdefault(k, np.zeros_like(a))

    def __getitem__(self, key):
        return self.values[key]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def copy(self):
        return ParamSet(
            {k: a.copy() for k, a in self.values.items()},
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def num_parameters(self):
        return int(sum(a.size for a in self.values.values()))


def optimizer_step(params: ParamSet, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, only=None):
    """One Adam update, in place. Returns ``params``.

    ``only`` restricts the update to a subset of parameter names; the step
    counter still advances by one.
    """
    if lr <= 0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    names = list(params.keys()) if only is None else list(only)
    for k in names:
        if k not in grads:
            raise ContractViolation(f"missing gradient for parameter '{k}'")
        if np.shape(grads[k]) != params.values[k].shape:
            raise ContractViolation(
                f"gradient shape {np.shape(grads[k])} does not match parameter '{k}' {params.values[k].shape}"
            )
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in names:
        g = np.asarray(grads[k], dtype=DTYPE)
        m = params.m[k]
        v = params.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.values[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# -- multilayer perceptrons ---------------------------------------------------


def init_mlp(arch: Sequence[int], rng: np.random.Generator, prefix="", zero_last=False):
    """Parameters ``{prefix}W{i}``, ``{prefix}b{i}`` for a dense network ``arch``."""
    params = {}
    n_layers = len(arch) - 1
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        if zero_last and i == n_layers - 1:
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"{prefix}W{i}"] = W
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def mlp_apply(params, x, arch: Sequence[int], activation="silu", prefix=""):
    """Feed-forward pass; the activation is applied between layers, not after the last."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != arch[0]:
        raise ContractViolation(f"input width {x.shape[-1]} does not match first layer {arch[0]}")
    act = ACTIVATIONS[activation]
    n_layers = len(arch) - 1
    h = x
    for i in range(n_layers):
        W = as_tensor(params[f"{prefix}W{i}"])
        if W.shape != (arch[i], arch[i + 1]):
            raise ContractViolation(f"layer {i} weight shape {W.shape} does not match arch {arch}")
        h = h @ W + as_tensor(params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=DTYPE))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def central_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step=1e-5):
    """Central finite-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step=1e-5):
    """Central finite-difference Jacobian ``J[i, j] = d fn(x)_i / d x_j`` for a vector map."""
    x = np.array(x, dtype=DTYPE).ravel()
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))).ravel() / (2 * step))
    return np.stack(cols, axis=1)


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
