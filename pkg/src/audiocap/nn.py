"""Minimal reverse-mode autodiff substrate on numpy arrays.

Provides the Tensor graph, the op set needed by the captioning pipeline
(matmul, softmax, attention, RMS norm, cross-entropy, embeddings), the
AdamW optimizer with decoupled weight decay, and a central-difference
gradient checker. Runtime precision is float32; tests run the same code
in float64 for gradient checks.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptyTargetSet(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


def rng_from_seed(seed) -> np.random.Generator:
    """Seed may be an int or a sequence of ints (SeedSequence entropy)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.ndim != 0:
            raise ShapeMismatch("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data + other.data
        req = self.requires_grad or other.requires_grad
        out = Tensor(out_data, req, (self, other))

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.data.shape))

        if req:
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad, (self,))
        if self.requires_grad:
            out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data,
                     self.requires_grad or other.requires_grad, (self, other))

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        if out.requires_grad:
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = Tensor(self.data[key], self.requires_grad, (self,))

        def backward():
            g = np.zeros_like(self.data)
            np.add.at(g, key, out.grad)
            self._accum(g)

        if self.requires_grad:
            out._backward = backward
        return out


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


# -- shape ops -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionMismatch("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionMismatch(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

    def backward():
        if a.requires_grad:
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            b._accum(_unbroadcast(gb, b.data.shape))

    if out.requires_grad:
        out._backward = backward
    return out


def reshape(t: Tensor, shape) -> Tensor:
    out = Tensor(t.data.reshape(shape), t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(out.grad.reshape(t.data.shape))
    return out


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(t.data, axes), t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(np.transpose(out.grad, inv))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    req = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 req, tuple(tensors))

    def backward():
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(idx)])

    if req:
        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                for t in tensors]
    return concat(expanded, axis=axis)


def tsum(t: Tensor) -> Tensor:
    out = Tensor(t.data.sum(), t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(np.broadcast_to(out.grad, t.data.shape))
    return out


def tmean(t: Tensor) -> Tensor:
    n = t.data.size
    out = Tensor(t.data.mean(), t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(
            np.broadcast_to(out.grad / n, t.data.shape))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` (V, d) by an integer id array."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids], table.requires_grad, (table,))

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accum(g)

    if table.requires_grad:
        out._backward = backward
    return out


# -- nonlinearities --------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Tanh-form GELU; the backward differentiates the same expression."""
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + th), t.requires_grad, (t,))

    def backward():
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        t._accum(out.grad * d)

    if t.requires_grad:
        out._backward = backward
    return out


def softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-shifted)."""
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=np.float64))
    x = t.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, t.requires_grad, (t,))

    def backward():
        g = out.grad
        dot = np.sum(g * y, axis=axis, keepdims=True)
        t._accum(y * (g - dot))

    if t.requires_grad:
        out._backward = backward
    return out


def rms_norm(t: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, over the last axis."""
    x = t.data
    if gain.data.shape != x.shape[-1:]:
        raise DimensionMismatch("rms_norm gain must match the last axis")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    inv = inv.astype(x.dtype, copy=False)
    y = x * inv * gain.data
    out = Tensor(y, t.requires_grad or gain.requires_grad, (t, gain))

    def backward():
        g = out.grad
        if t.requires_grad:
            gg = g * gain.data
            dot = np.sum(gg * x, axis=-1, keepdims=True)
            t._accum(gg * inv - x * (inv ** 3) * dot / n)
        if gain.requires_grad:
            gain._accum(np.sum(g * x * inv, axis=tuple(range(x.ndim - 1))))

    if out.requires_grad:
        out._backward = backward
    return out


def add_const(t: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array (no gradient into it); used for attention masks."""
    out = Tensor(t.data + arr, t.requires_grad, (t,))
    if t.requires_grad:
        out._backward = lambda: t._accum(_unbroadcast(out.grad, t.data.shape))
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over token matrices (..., T, d).

    `mask` is an additive array broadcastable to (..., Tq, Tk); masked
    positions carry -inf and so receive zero attention weight.
    """
    d = q.data.shape[-1]
    if d % n_heads:
        raise DimensionMismatch(f"model dim {d} not divisible by {n_heads} heads")
    if k.data.shape[-1] != d or v.data.shape[-1] != d:
        raise DimensionMismatch("q, k, v must share their last dimension")
    dh = d // n_heads

    def split(t: Tensor) -> Tensor:
        tt = reshape(t, t.data.shape[:-1] + (n_heads, dh))
        nd = tt.data.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(tt, axes)  # (..., heads, T, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, tuple(range(kh.data.ndim - 2)) +
                                  (kh.data.ndim - 1, kh.data.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add_const(scores, mask)
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)  # (..., heads, Tq, dh)
    nd = ctx.data.ndim
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(ctx, ctx.data.shape[:-2] + (d,))


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-softmax over non-ignored positions.

    logits: (..., V); targets: integer ids (...,); ignore_mask: bool (...,)
    with True marking positions EXCLUDED from the loss.
    """
    vocab = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.min(initial=0) < 0 or tgt.max(initial=0) >= vocab:
        raise ShapeMismatch("target id outside vocabulary range")
    if ignore_mask is None:
        keep = np.ones(tgt.shape[0], dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask).reshape(-1)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        raise EmptyTargetSet("all positions are ignored")
    rows = flat[idx]
    m = rows.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=-1))
    picked = rows[np.arange(idx.size), tgt[idx]]
    loss = (lse - picked).mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype), logits.requires_grad,
                 (logits,))

    def backward():
        probs = np.exp(rows - m)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(idx.size), tgt[idx]] -= 1.0
        g = np.zeros_like(flat)
        g[idx] = probs * (out.grad / idx.size)
        logits._accum(g.reshape(logits.data.shape))

    if logits.requires_grad:
        out._backward = backward
    return out


# -- modules ---------------------------------------------------------------

class Module:
    """Parameter container with recursive named traversal."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, init_std: float = 0.02, dtype=np.float32):
        self.weight = parameter(rng.normal(0.0, init_std, (d_out, d_in)), dtype)
        self.bias = parameter(np.zeros(d_out), dtype) if bias else None
        if self.bias is None:
            del self.bias  # keep named_parameters free of None entries

    @classmethod
    def from_weights(cls, weight: np.ndarray, bias: np.ndarray | None = None) -> "Linear":
        layer = cls.__new__(cls)
        layer.weight = Tensor(np.ascontiguousarray(weight), requires_grad=True)
        if bias is not None:
            layer.bias = Tensor(np.ascontiguousarray(bias), requires_grad=True)
        return layer

    @property
    def d_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.d_in:
            raise DimensionMismatch(
                f"linear expects last dim {self.d_in}, got {x.data.shape}")
        y = matmul(x, transpose(self.weight, (1, 0)))
        b = getattr(self, "bias", None)
        if b is not None:
            y = y + b
        return y


class MultiHeadAttention(Module):
    """q/k/v/o projections around scaled dot-product attention.

    kv_dim lets the key/value input live in a different width than the
    query input (used by the bridge's cross-attention).
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None, dtype=np.float32):
        if d_model % n_heads:
            raise DimensionMismatch(f"{d_model} not divisible by {n_heads} heads")
        kv = kv_dim if kv_dim is not None else d_model
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng, dtype=dtype)
        self.k = Linear(kv, d_model, rng, dtype=dtype)
        self.v = Linear(kv, d_model, rng, dtype=dtype)
        self.o = Linear(d_model, d_model, rng, dtype=dtype)

    def __call__(self, query_input: Tensor, kv_input: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        qp = self.q(query_input)
        kp = self.k(kv_input)
        vp = self.v(kv_input)
        ctx = multi_head_attention(qp, kp, vp, self.n_heads, mask)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, mult: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.up = Linear(d_model, d_model * mult, rng, dtype=dtype)
        self.down = Linear(d_model * mult, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: attention then feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int,
                 rng: np.random.Generator, kv_dim: int | None = None,
                 dtype=np.float32):
        self.attn_gain = parameter(np.ones(d_model), dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, kv_dim, dtype)
        self.ffn_gain = parameter(np.ones(d_model), dtype)
        self.ffn = FeedForward(d_model, ffn_mult, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        h = rms_norm(x, self.attn_gain)
        kv = h if context is None else context
        x = x + self.attn(h, kv, mask)
        x = x + self.ffn(rms_norm(x, self.ffn_gain))
        return x


# -- optimizer -------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay and optional global-norm clipping.

    Decay is applied directly to the parameter (w -= lr*wd*w computed from
    the pre-step value), separately from the bias-corrected adaptive step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _clip(self, grads: dict[str, np.ndarray]):
        if self.clip_norm is None:
            return grads
        total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                              for g in grads.values()))
        if total > self.clip_norm and total > 0.0:
            scale = self.clip_norm / total
            grads = {k: g * np.asarray(scale, dtype=g.dtype)
                     for k, g in grads.items()}
        return grads

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        grads = {}
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {k}")
            grads[k] = g
        grads = self._clip(grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            decay = lr * self.weight_decay * p.data if self.weight_decay else 0.0
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - decay - lr * mhat / (np.sqrt(vhat) + self.eps)


# -- gradient checking -----------------------------------------------------

def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor] | dict,
               h: float | tuple[float, ...] = 1e-5,
               samples_per_param: int | None = None,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of f() against central differences.

    f is a closure over `params` returning a scalar Tensor. With
    samples_per_param=None every entry of every parameter is perturbed;
    otherwise that many entries per parameter are drawn from a seeded RNG.
    Returns the max relative error |a-n| / max(|a|, |n|, 1e-8).

    h may be a single step or several; with several, each entry scores
    the best-agreeing step. No single global step serves every entry:
    small-gradient coordinates need a large step to rise above float64
    cancellation noise, while high-curvature coordinates need a small one
    to keep truncation down. A genuinely wrong backward pass disagrees at
    every step size, so the per-entry choice does not mask defects.
    """
    if isinstance(params, dict):
        params = list(params.values())
    else:
        params = list(params)
    steps = (h,) if isinstance(h, float) else tuple(h)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data):
        raise NonFiniteValue("objective is not finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    rng = rng_from_seed(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        size = p.data.size
        if samples_per_param is None or samples_per_param >= size:
            entries = np.arange(size)
        else:
            entries = rng.choice(size, size=samples_per_param, replace=False)
        for j in entries:
            orig = p.data.flat[j]
            best = math.inf
            for step in steps:
                p.data.flat[j] = orig + step
                f1 = float(f().data)
                p.data.flat[j] = orig - step
                f2 = float(f().data)
                p.data.flat[j] = orig
                if not (math.isfinite(f1) and math.isfinite(f2)):
                    raise NonFiniteValue(
                        "objective is not finite under perturbation")
                numeric = (f1 - f2) / (2.0 * step)
                best = min(best, relative_error(float(a.flat[j]), numeric))
            worst = max(worst, best)
    return worst
