"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every model in the package (quantized autoencoder, sequential VAE,
termination classifier, behaviour-cloning policies) is built from the
:class:`Tensor` operations below and trained with :class:`Adam`.
"""
from __future__ import annotations

import contextlib
import json
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, TrainingError, UsageError

DTYPE = np.float64
ACTIVATIONS = ("tanh", "relu", "identity")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
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
    """A node in the computation graph.

    ``parents`` is a tuple of ``(node, vjp)`` pairs where ``vjp`` maps the
    upstream gradient of this node to the contribution for ``node``.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

    def zero_grad(self):
        self.grad = None

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def _node(value, *pairs) -> Tensor:
    return Tensor(value, parents=[(p, f) for p, f in pairs if p.requires_grad])


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.value**2, (x, lambda g: 2.0 * g * x.value))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x, lambda g: g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.value), (x, lambda g: g / x.value))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _node(out, (x, lambda g: g * (1.0 - out**2)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(x.value * mask, (x, lambda g: g * mask))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.value)
    return _node(out, (x, lambda g: g * out * (1.0 - out)))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.logaddexp(0.0, x.value), (x, lambda g: g * _sigmoid(x.value)))


def clip(x, lo, hi) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    mask = (x.value >= lo) & (x.value <= hi)
    return _node(np.clip(x.value, lo, hi), (x, lambda g: g * mask))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


# reductions and shape ------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return _node(out, (x, vjp))


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _node(
        a.value @ b.value,
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.value.T, (x, lambda g: g.T))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.value.reshape(shape), (x, lambda g: g.reshape(x.shape)))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return out

    return _node(x.value[index], (x, vjp))


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` (scatter-add on the way back)."""
    return getitem(x, (np.asarray(idx, dtype=np.intp),))


def concat(xs: Sequence, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    pairs = []
    for i, x in enumerate(xs):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        pairs.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _node(out, *pairs)


# stop-gradient -------------------------------------------------------------

class _StopTape:
    """Records stop-gradient values so a finite-difference check can hold them fixed."""

    def __init__(self):
        self.mode = None
        self.values = []
        self.cursor = 0


_TAPE = _StopTape()


@contextlib.contextmanager
def record_stops():
    _TAPE.mode, _TAPE.values = "record", []
    try:
        yield _TAPE.values
    finally:
        _TAPE.mode = None


@contextlib.contextmanager
def replay_stops(values):
    _TAPE.mode, _TAPE.values, _TAPE.cursor = "replay", list(values), 0
    try:
        yield
    finally:
        _TAPE.mode = None


def stop_gradient(x) -> Tensor:
    """Identity on values, zero gradient to everything upstream."""
    x = as_tensor(x)
    value = x.value.copy()
    if _TAPE.mode == "record":
        _TAPE.values.append(value)
    elif _TAPE.mode == "replay":
        value = _TAPE.values[_TAPE.cursor]
        _TAPE.cursor += 1
    return Tensor(value)


def straight_through(z_e, z_q) -> Tensor:
    """Forward value ``z_q``; backward copies the gradient to ``z_e`` unchanged."""
    z_e = as_tensor(z_e)
    return z_e + stop_gradient(as_tensor(z_q) - z_e)


# backward -------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Returns a mapping from each reachable leaf that requires grad to its
    gradient array.
    """
    if loss.value.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if not node.parents and node.requires_grad:
            leaves[node] = g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return leaves


# MLP -----------------------------------------------------------------------

class MlpParams:
    """Dense layers ``y = act(x W^T + b)``."""

    def __init__(self, weights: list, biases: list, activations: list):
        if not (len(weights) == len(biases) == len(activations)):
            raise ConfigurationError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
            if w.shape[0] != b.shape[0]:
                raise ConfigurationError(f"layer {i}: bias length {b.shape[0]} != out dim {w.shape[0]}")
            if i and weights[i - 1].shape[0] != w.shape[1]:
                raise ConfigurationError(f"layer {i}: in dim {w.shape[1]} does not chain")
        self.weights = weights
        self.biases = biases
        self.activations = list(activations)

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden="tanh", output="identity"):
        weights, biases, acts = [], [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(1.0 / n_in)
            weights.append(parameter(rng.normal(0.0, scale, size=(n_out, n_in))))
            biases.append(parameter(np.zeros(n_out)))
            acts.append(output if i == len(sizes) - 2 else hidden)
        return cls(weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x):
        return forward_mlp(self, x)

    def to_dict(self) -> dict:
        return {
            "activations": list(self.activations),
            "shapes": [list(w.shape) for w in self.weights],
            "weights": [w.value.tolist() for w in self.weights],
            "biases": [b.value.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        weights = [parameter(np.array(w, dtype=DTYPE).reshape(s)) for w, s in zip(d["weights"], d["shapes"])]
        biases = [parameter(np.array(b, dtype=DTYPE)) for b in d["biases"]]
        return cls(weights, biases, d["activations"])


_ACT_FN = {"tanh": tanh, "relu": relu, "identity": lambda x: x}


def forward_mlp(params: MlpParams, x) -> Tensor:
    """Evaluate the MLP on a vector (``in``) or batch (``n x in``)."""
    x = as_tensor(x)
    vector = x.ndim == 1
    if vector:
        x = reshape(x, (1, -1))
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"input dim {x.shape[-1]} != MLP in dim {params.in_dim}")
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACT_FN[act](matmul(h, transpose(w)) + b)
    if vector:
        h = reshape(h, (-1,))
    return h


# optimizer -------------------------------------------------------------------

class OptimState:
    """Adam moment estimates for a list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = list(params)
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.step = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps


def adam_step(params: Sequence[Tensor], grads: Sequence, state: OptimState) -> None:
    """In-place bias-corrected Adam update. ``None`` grads count as zero."""
    if len(params) != len(state.m):
        raise UsageError("parameter list does not match optimizer state")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingError(
                f"non-finite gradient in parameter {i} ({p.name or 'unnamed'}, shape {p.shape}): "
                f"{bad} bad entries at step {state.step}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Convenience wrapper: ``opt.step(loss)`` runs backward and updates."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = OptimState(self.params, lr, beta1, beta2, eps)

    def step(self, loss: Tensor) -> float:
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.state.step}")
        grads = backward(loss)
        adam_step(self.params, [grads.get(p) for p in self.params], self.state)
        return value


# gradient checking -------------------------------------------------------------

def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 100,
    rng: np.random.Generator | None = None,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic. Stop-gradient values are held at
    their base-point values during the finite differences, so the check
    verifies the surrogate that the backward pass actually differentiates.
    """
    rng = rng or np.random.default_rng(0)
    with record_stops() as stops:
        loss = loss_fn()
    grads = backward(loss)
    coords = [(pi, flat) for pi, p in enumerate(params) for flat in range(p.value.size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in pick]
    worst = 0.0
    for pi, flat in coords:
        p = params[pi]
        idx = np.unravel_index(flat, p.shape)
        orig = p.value[idx]
        p.value[idx] = orig + h
        with replay_stops(stops):
            up = float(loss_fn().value)
        p.value[idx] = orig - h
        with replay_stops(stops):
            down = float(loss_fn().value)
        p.value[idx] = orig
        numeric = (up - down) / (2 * h)
        g = grads.get(p)
        analytic = 0.0 if g is None else float(g[idx])
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# checkpoints -------------------------------------------------------------------

def save_checkpoint(path, kind: str, modules: dict, extra: dict | None = None) -> None:
    """Write named MLPs (plus plain-JSON ``extra``) as a self-describing document."""
    doc = {
        "kind": kind,
        "dtype": "float64",
        "modules": {name: m.to_dict() for name, m in modules.items()},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path, kind: str | None = None):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if kind is not None and doc.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected checkpoint kind {kind!r}, found {doc.get('kind')!r}")
    modules = {name: MlpParams.from_dict(m) for name, m in doc["modules"].items()}
    return modules, doc.get("extra", {})
