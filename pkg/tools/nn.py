"""
Dense float64 tensors with reverse-mode automatic differentiation, MLPs,
Adam / optimistic Adam, categorical and Gaussian-mixture log-likelihoods,
and flat binary parameter checkpoints.

Every operation records its parents and a closure mapping the output
gradient to parent gradients; `gradient` walks that tape backwards.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp as _np_logsumexp

from tools.utils import rng_stream

LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor dispatches to the reflected Tensor method

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name="") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _op(value, parents, backward_fn) -> Tensor:
    return Tensor(value, parents=tuple(parents), backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value / b.value, (a, b),
               lambda g: (_unbroadcast(g / b.value, a.shape),
                          _unbroadcast(-g * a.value / b.value ** 2, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _op(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _op(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _op(a.value * mask, (a,), lambda g: (g * mask,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    expm = np.exp(np.minimum(a.value, 0.0))
    out = np.where(pos, a.value, expm - 1.0)
    return _op(out, (a,), lambda g: (g * np.where(pos, 1.0, expm),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _op(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _op(np.sum(a.value, axis=axis, keepdims=keepdims), (a,),
               lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_keep = _np_logsumexp(a.value, axis=axis, keepdims=True)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def backward(g):
        g_keep = g if keepdims else np.expand_dims(g, axis)
        return (g_keep * np.exp(a.value - out_keep),)

    return _op(out, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Shape and linear-algebra ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _op(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _op(a.value[idx], (a,), backward)


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _op(np.concatenate([t.value for t in tensors], axis=axis), tensors,
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def solve(a, b) -> Tensor:
    """X = A^{-1} B for square A and 2-D B."""
    a, b = as_tensor(a), as_tensor(b)
    x = np.linalg.solve(a.value, b.value)

    def backward(g):
        gb = np.linalg.solve(a.value.T, g)
        return (-gb @ x.T, gb)

    return _op(x, (a, b), backward)


def layer_norm(a, eps=1e-5) -> Tensor:
    centered = sub(a, mean(a, axis=1, keepdims=True))
    var = mean(square(centered), axis=1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


def l2_penalty(params: Sequence[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = add(total, sum(square(p)))
    return total


def gradient(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """
    d loss / d params by reverse accumulation. Parameters that the loss
    does not depend on get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"gradient needs a scalar loss, got shape {loss.shape}")

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)

    return [grads.get(id(p), np.zeros_like(p.value)).reshape(p.shape) for p in params]


def numerical_gradient(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> List[np.ndarray]:
    """Central finite differences of loss_fn() with respect to each parameter entry."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().value)
            flat[i] = orig - h
            down = float(loss_fn().value)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Multilayer perceptron
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"relu": (relu, lambda x: np.maximum(x, 0.0)),
                "elu": (elu, lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))),
                "tanh": (tanh, np.tanh)}


class Mlp:
    """
    Fully connected network. Weights are stored (fan_in, fan_out) and
    initialised uniformly in +-sqrt(1 / fan_in). `activate_output` applies
    the activation after the last layer too (feature networks).
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: str = "relu",
        layer_norm: bool = False,
        activate_output: bool = False,
        seed: int = 0,
        stream: str = "init",
    ):
        if len(layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.layer_norm = bool(layer_norm)
        self.activate_output = bool(activate_output)

        rng = rng_stream(seed, stream)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            bound = np.sqrt(1.0 / fan_in)
            self.weights.append(parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), name=f"W{i}"))
            self.biases.append(parameter(rng.uniform(-bound, bound, fan_out), name=f"b{i}"))

    @property
    def parameters(self) -> List[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @property
    def n_parameters(self) -> int:
        return int(np.sum([p.value.size for p in self.parameters]))

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def _check_input(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input of shape (n, {self.layer_sizes[0]}), got {x.shape}")

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        self._check_input(h.value)
        act = _ACTIVATIONS[self.activation][0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < last or self.activate_output:
                if i == 0 and self.layer_norm:
                    h = layer_norm(h)
                h = act(h)
        return h

    def predict(self, x) -> np.ndarray:
        """Tape-free forward pass."""
        h = np.asarray(x, dtype=np.float64)
        self._check_input(h)
        act = _ACTIVATIONS[self.activation][1]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last or self.activate_output:
                if i == 0 and self.layer_norm:
                    c = h - h.mean(axis=1, keepdims=True)
                    h = c / np.sqrt((c ** 2).mean(axis=1, keepdims=True) + 1e-5)
                h = act(h)
        return h

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.reshape(-1) for p in self.parameters])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters:
            raise ValueError(f"expected {self.n_parameters} parameters, got {flat.size}")
        offset = 0
        for p in self.parameters:
            size = p.value.size
            p.value = flat[offset:offset + size].reshape(p.shape).copy()
            offset += size

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_sizes = list(self.layer_sizes)
        clone.activation = self.activation
        clone.layer_norm = self.layer_norm
        clone.activate_output = self.activate_output
        clone.weights = [parameter(w.value.copy(), name=w.name) for w in self.weights]
        clone.biases = [parameter(b.value.copy(), name=b.name) for b in self.biases]
        return clone

    def architecture(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "layer_norm": self.layer_norm,
            "activate_output": self.activate_output,
        }


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    previous_step: List[np.ndarray] = field(default_factory=list)
    t: int = 0


def make_optimizer(kind: str, params: Sequence[Tensor], step_size: float,
                   beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> OptimizerState:
    if kind not in ("adam", "oadam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    zeros = [np.zeros_like(p.value) for p in params]
    return OptimizerState(
        kind=kind,
        step_size=step_size,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        first_moment=[z.copy() for z in zeros],
        second_moment=[z.copy() for z in zeros],
        previous_step=[z.copy() for z in zeros] if kind == "oadam" else [],
    )


def step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """
    Bias-corrected Adam update. For "oadam" the applied update is
    2 * (current Adam step) - (previous Adam step), previous starting at 0.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g ** 2
        m_hat = state.first_moment[i] / c1
        v_hat = state.second_moment[i] / c2
        adam_step = -state.step_size * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if state.kind == "oadam":
            p.value = p.value + 2.0 * adam_step - state.previous_step[i]
            state.previous_step[i] = adam_step
        else:
            p.value = p.value + adam_step
    return params


# ---------------------------------------------------------------------------
# Output heads
# ---------------------------------------------------------------------------

def categorical_logprob(logits, target) -> Tensor:
    """log p(target) under softmax(logits), one entry per row."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    return take(log_softmax(logits, axis=1), (np.arange(target.shape[0]), target))


@dataclass
class MixtureParams:
    weight_logits: Tensor  # (n, K)
    means: Tensor  # (n, K, d)
    log_scales: Tensor  # (n, K, d)


def mixture_head_size(n_components: int, dim: int) -> int:
    return n_components * (1 + 2 * dim)


def split_mixture_output(out: Tensor, n_components: int, dim: int) -> MixtureParams:
    n = out.shape[0]
    k, kd = n_components, n_components * dim
    return MixtureParams(
        weight_logits=take(out, (slice(None), slice(0, k))),
        means=reshape(take(out, (slice(None), slice(k, k + kd))), (n, k, dim)),
        log_scales=reshape(take(out, (slice(None), slice(k + kd, k + 2 * kd))), (n, k, dim)),
    )


def mixture_logprob(params: MixtureParams, target) -> Tensor:
    """log sum_k w_k N(target; mu_k, diag(sigma_k^2)), via log-sum-exp."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
    z = mul(sub(target[:, None, :], params.means), exp(neg(params.log_scales)))
    per_dim = sub(mul(-0.5, square(z)), add(params.log_scales, 0.5 * LOG_2PI))
    component = sum(per_dim, axis=2)
    log_weights = log_softmax(params.weight_logits, axis=1)
    return logsumexp(add(log_weights, component), axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"IVNN"


def checkpoint_bytes(mlp: Mlp) -> bytes:
    header = json.dumps(mlp.architecture(), sort_keys=True).encode("utf-8")
    body = mlp.get_flat().astype("<f8").tobytes()
    return _MAGIC + struct.pack("<I", len(header)) + header + body


def mlp_from_bytes(blob: bytes) -> Mlp:
    if blob[:4] != _MAGIC:
        raise ValueError("not an ivope network checkpoint")
    (header_len,) = struct.unpack("<I", blob[4:8])
    arch = json.loads(blob[8:8 + header_len].decode("utf-8"))
    mlp = Mlp(arch["layer_sizes"], arch["activation"], arch["layer_norm"], arch["activate_output"])
    mlp.set_flat(np.frombuffer(blob[8 + header_len:], dtype="<f8"))
    return mlp


def save_checkpoint(mlp: Mlp, path: str) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(mlp))


def load_checkpoint(path: str) -> Mlp:
    with open(path, "rb") as f:
        return mlp_from_bytes(f.read())
