"""Small numpy neural toolkit with hand-written backward passes.

Modules cache what their backward pass needs during ``forward``; call
``backward`` once per ``forward``, before the next forward on the same module.
Gradients accumulate into ``Parameter.grad`` until ``zero_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, NonFiniteInput, ShapeMismatch

LAYER_NORM_EPS = 1e-5


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def xavier_uniform(rng, fan_out, fan_in, dtype=np.float32, gain=1.0):
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


# ---------------------------------------------------------------- functional

def linear_forward(x, W, b):
    x, W, b = np.asarray(x), np.asarray(W), np.asarray(b)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def linear_backward(dy, x, W):
    """Returns (dx, dW, db) for y = x W^T + b with x of shape B x D_in."""
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def softmax(logits, axis=-1):
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInput("softmax received non-finite logits")
    z = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInput("log_softmax received non-finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``.

    Accepts a single C-vector with an int target, or N x C logits with N targets.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    L = logits[None, :] if single else logits
    t = np.atleast_1d(np.asarray(target))
    C = L.shape[1]
    if t.shape != (L.shape[0],):
        raise ShapeMismatch(f"{L.shape[0]} rows of logits but {t.shape} targets")
    if np.any(t < 0) or np.any(t >= C):
        raise IndexOutOfRange(f"target outside [0, {C})")
    logp = log_softmax(L)
    rows = np.arange(len(t))
    loss = -logp[rows, t].mean()
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    grad /= len(t)
    return float(loss), (grad[0] if single else grad)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_tanh(x):
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x, th=None):
    """tanh approximation of GELU."""
    if th is None:
        th = _gelu_tanh(x)
    return 0.5 * x * (1.0 + th)


def gelu_grad(x, th=None):
    if th is None:
        th = _gelu_tanh(x)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def sinusoidal_positions(T: int, d: int, dtype=np.float32):
    pos = np.arange(T)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    return pe.astype(dtype)


# ------------------------------------------------------------------- modules

class Module:
    def parameters(self) -> list[Parameter]:
        params = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng, dtype=np.float32, gain=1.0, bias=True):
        self.weight = Parameter(f"{name}.weight", xavier_uniform(rng, d_out, d_in, dtype, gain))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        self._x = x
        if self.bias is None:
            if x.shape[-1] != self.weight.value.shape[1]:
                raise ShapeMismatch(f"x {x.shape}, W {self.weight.value.shape}")
            return x @ self.weight.value.T
        return linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, dy):
        dx, dW, db = linear_backward(dy, self._x, self.weight.value)
        self.weight.grad += dW
        if self.bias is not None:
            self.bias.grad += db
        return dx


class LayerNorm(Module):
    def __init__(self, name, d, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(d, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(d, dtype=dtype))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        self._xhat = (x - mu) * self._inv
        return self._xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        g = dy * self.gamma.value
        d = xhat.shape[-1]
        return inv / d * (d * g - g.sum(axis=-1, keepdims=True)
                          - xhat * (g * xhat).sum(axis=-1, keepdims=True))


class MultiHeadSelfAttention(Module):
    """Unmasked scaled dot-product attention over a T x D sequence."""

    def __init__(self, name, d, heads, rng, dtype=np.float32):
        if d % heads:
            raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(f"{name}.q", d, d, rng, dtype)
        # a key bias only shifts each query's scores by a constant, which softmax ignores
        self.k = Linear(f"{name}.k", d, d, rng, dtype, bias=False)
        self.v = Linear(f"{name}.v", d, d, rng, dtype)
        self.out = Linear(f"{name}.out", d, d, rng, dtype)
        self.attention = None

    def _split(self, x):
        T, D = x.shape
        return x.reshape(T, self.heads, D // self.heads).transpose(1, 0, 2)

    def _merge(self, x):
        H, T, dh = x.shape
        return x.transpose(1, 0, 2).reshape(T, H * dh)

    def forward(self, x):
        q, k, v = (self._split(lin.forward(x)) for lin in (self.q, self.k, self.v))
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        self._cache = (q, k, v, a, scale)
        self.attention = a
        return self.out.forward(self._merge(a @ v))

    def backward(self, dy):
        q, k, v, a, scale = self._cache
        dctx = self._split(self.out.backward(dy))
        da = dctx @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dctx
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        return (self.q.backward(self._merge(dq)) + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class FeedForward(Module):
    def __init__(self, name, d, d_ff, rng, dtype=np.float32):
        self.fc1 = Linear(f"{name}.fc1", d, d_ff, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", d_ff, d, rng, dtype)

    def forward(self, x):
        self._h = self.fc1.forward(x)
        self._th = _gelu_tanh(self._h)
        return self.fc2.forward(gelu(self._h, self._th))

    def backward(self, dy):
        return self.fc1.backward(self.fc2.backward(dy) * gelu_grad(self._h, self._th))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, name, d, heads, d_ff, rng, dtype=np.float32):
        self.ln1 = LayerNorm(f"{name}.ln1", d, dtype)
        self.attn = MultiHeadSelfAttention(f"{name}.attn", d, heads, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", d, dtype)
        self.ffn = FeedForward(f"{name}.ffn", d, d_ff, rng, dtype)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.ln1.gamma.value.shape[0]:
            raise ShapeMismatch(f"block expects T x {self.ln1.gamma.value.shape[0]}, got {x.shape}")
        h = x + self.attn.forward(self.ln1.forward(x))
        return h + self.ffn.forward(self.ln2.forward(h))

    def backward(self, dy):
        dh = dy + self.ln2.backward(self.ffn.backward(dy))
        return dh + self.ln1.backward(self.attn.backward(dh))


def transformer_block_forward(block: TransformerBlock, x):
    return block.forward(x)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.value -= step.astype(p.value.dtype)
    return state


# ------------------------------------------------------------ gradient check

def grad_check(loss_fn, wrt, grads, eps=1e-4):
    """Max elementwise relative error between ``grads`` and central differences.

    ``loss_fn()`` must read the arrays in ``wrt`` by reference; each element is
    perturbed in place and restored. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    worst = 0.0
    for arr, analytic in zip(wrt, grads):
        if arr.shape != analytic.shape:
            raise ShapeMismatch(f"gradient shape {analytic.shape} != {arr.shape}")
        flat = arr.reshape(-1)
        ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            denom = max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, abs(ana[i] - num) / denom)
    return worst
