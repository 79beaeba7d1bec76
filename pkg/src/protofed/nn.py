"""Small dense network with a hand-written reverse-mode tape.

A model is a feature extractor (stack of dense layers) followed by a single
dense classifier.  Plain forward passes go through :func:`forward_extract` and
:func:`forward_classify`; differentiable passes go through a :class:`Trace`,
which records whole-array operations and is consumed by :func:`backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, StateError

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "linear"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"dense layer weight {self.weight.shape} incompatible with bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ModelParams:
    """Extractor layers plus classifier.  Also used to hold gradients."""

    extractor: tuple[Dense, ...]
    classifier: Dense

    def __post_init__(self):
        layers = list(self.extractor) + [self.classifier]
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer chain broken: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_dim

    @property
    def proto_dim(self) -> int:
        return self.extractor[-1].out_dim

    @property
    def n_classes(self) -> int:
        return self.classifier.out_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in (*self.extractor, self.classifier):
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        if len(arrays) != 2 * (len(self.extractor) + 1):
            raise ShapeError("array count does not match model structure")
        layers = []
        for i, layer in enumerate((*self.extractor, self.classifier)):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {i}: got {w.shape}/{b.shape}")
            layers.append(Dense(w, b, layer.activation))
        return ModelParams(tuple(layers[:-1]), layers[-1])

    def zeros_like(self) -> "ModelParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return self.with_arrays(out)

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


GradientSet = ModelParams


def init_params(input_dim: int, hidden_dims: Sequence[int], proto_dim: int,
                n_classes: int, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias.

    Hidden extractor layers use ReLU; the last extractor layer is linear so
    prototypes can point in any direction.
    """
    dims = [input_dim, *hidden_dims, proto_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        act = "relu" if i < len(dims) - 2 else "linear"
        layers.append(Dense(rng.uniform(-bound, bound, (fan_in, fan_out)),
                            rng.uniform(-bound, bound, fan_out), act))
    bound = 1.0 / np.sqrt(proto_dim)
    clf = Dense(rng.uniform(-bound, bound, (proto_dim, n_classes)),
                rng.uniform(-bound, bound, n_classes))
    return ModelParams(tuple(layers), clf)


def _dense(layer: Dense, x: np.ndarray) -> np.ndarray:
    z = x @ layer.weight + layer.bias
    return np.maximum(z, 0.0) if layer.activation == "relu" else z


def _check_input(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ShapeError(f"{what} expects last dimension {dim}, got shape {x.shape}")
    return x


def forward_extract(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Compressed features for a sample (1-D) or a batch (2-D, rows are samples)."""
    h = _check_input(x, params.input_dim, "feature extractor")
    for layer in params.extractor:
        h = _dense(layer, h)
    return h


def forward_classify(params: ModelParams, u: np.ndarray) -> np.ndarray:
    u = _check_input(u, params.proto_dim, "classifier")
    return _dense(params.classifier, u)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_classify(params, forward_extract(params, x)), axis=-1)


# --------------------------------------------------------------------------
# reverse-mode tape


class Var:
    """Node of the recorded computation.  ``value`` is a numpy array."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents: tuple["Var", ...] = (),
                 backward_fn: Callable[[np.ndarray], tuple] | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value
    return Var(out, (a, b),
               lambda g: (_unbroadcast(g / b.value, a.shape),
                          _unbroadcast(-g * out / b.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul on the tape expects 2-D operands")
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def total(a, axis=None) -> Var:
    """Sum over ``axis`` (all entries when ``None``)."""
    a = as_var(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(a.value.sum(axis=axis), (a,), bw)


def mean(a, axis=None) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(total(a, axis), 1.0 / n)


def dot_rows(a, b) -> Var:
    """Row-wise inner products of two (n, d) arrays; 1-D inputs give a scalar."""
    return total(mul(a, b), axis=-1)


def norm_rows(a) -> Var:
    a = as_var(a)
    out = np.sqrt(np.sum(a.value * a.value, axis=-1))
    return Var(out, (a,), lambda g: (np.expand_dims(g / out, -1) * a.value,))


def cross_entropy(logits, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``labels``, log-sum-exp stabilised."""
    logits = as_var(logits)
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean()

    def bw(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return Var(loss, (logits,), bw)


def dense_var(layer_w: Var, layer_b: Var, activation: str, x) -> Var:
    z = add(matmul(x, layer_w), layer_b)
    return relu(z) if activation == "relu" else z


@dataclass
class Trace:
    """Records a differentiable pass over ``params``.

    Every parameter array becomes a leaf :class:`Var`; build the loss with
    :meth:`extract`, :meth:`classify` and the tape ops, then call
    :func:`backward`.
    """

    params: ModelParams
    leaves: list[Var] = field(init=False)

    def __post_init__(self):
        self.leaves = [Var(a) for a in self.params.arrays()]

    def extract(self, x) -> Var:
        h = as_var(np.atleast_2d(_check_input(x, self.params.input_dim, "feature extractor")))
        for i, layer in enumerate(self.params.extractor):
            h = dense_var(self.leaves[2 * i], self.leaves[2 * i + 1], layer.activation, h)
        return h

    def classify(self, u) -> Var:
        u = as_var(u)
        if u.shape[-1] != self.params.proto_dim:
            raise ShapeError(f"classifier expects {self.params.proto_dim}-dim input, got {u.shape}")
        return dense_var(self.leaves[-2], self.leaves[-1], self.params.classifier.activation, u)


def backward(trace: Trace | None, loss) -> GradientSet:
    """Gradient of scalar ``loss`` with respect to every parameter of ``trace``."""
    if trace is None or not isinstance(loss, Var):
        raise StateError("backward needs a recorded trace and a loss built on it")
    if loss.value.size != 1:
        raise ShapeError("loss must be a scalar")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if id(p) not in seen)

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    arrays = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
              for leaf in trace.leaves]
    for leaf in trace.leaves:
        leaf.grad = None
    return trace.params.with_arrays(arrays)


def sgd_step(params: ModelParams, grads: GradientSet, eta: float) -> ModelParams:
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    new = []
    for p, g in zip(params.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        new.append(p - eta * g)
    return params.with_arrays(new)
