"""Neural building blocks assembled from :mod:`divtok.tensor` ops.

All blocks are pure functions of a :class:`ParameterStore` plus inputs.
Parameters are addressed by slash-delimited paths such as
``encoder/layer0/attn/wq``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from divtok.rng import SplitMix64
from divtok.tensor import (
    Tensor,
    add,
    concat,
    matmul,
    relu,
    take_rows,
)

NEG_INF = -1e9
LN_EPS = 1e-6


class ParameterStore:
    """Ordered name -> Tensor map of trainable weights."""

    def __init__(self, dtype=np.float64):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.dtype = np.dtype(dtype)

    def add(self, name: str, shape, init: str, rng: SplitMix64 | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape))
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "glorot":
            fan_in, fan_out = (shape[0], shape[0]) if len(shape) == 1 else (shape[-2], shape[-1])
            s = math.sqrt(6.0 / (fan_in + fan_out))
            data = (rng.uniform_array(n) * 2.0 - 1.0).reshape(shape) * s
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for name, t in self._params.items():
            out._params[name] = Tensor(t.data.copy(), requires_grad=True)
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for name, t in self._params.items():
            out._params[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        return out

    def scoped(self, prefix: str) -> "Scope":
        return Scope(self, prefix)


class Scope:
    """Prefix view over a store: ``scope["wq"]`` is ``store[prefix + "/wq"]``."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}/{name}" in self.store

    def add(self, name, shape, init, rng=None) -> Tensor:
        return self.store.add(f"{self.prefix}/{name}", shape, init, rng)

    def scoped(self, prefix: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}/{prefix}")


# -- primitives -------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w) if x.ndim >= 2 else matmul(x.reshape(1, -1), w).reshape(w.shape[1])
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * gamma.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(out, (x, gamma, beta), bw, "layer_norm")


def embed(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


# -- attention ----------------------------------------------------------------------


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """(N, S) boolean validity -> additive mask broadcastable to (N, heads, T, S)."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, NEG_INF)[:, None, None, :]


def init_attention(scope: Scope, d: int, rng: SplitMix64) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        scope.add(name, (d, d), "glorot", rng)
    for name in ("bq", "bk", "bv", "bo"):
        scope.add(name, (d,), "zeros")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: Scope, mask=None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads over (N, T, d) inputs.

    ``mask`` is an additive array broadcastable to (N, heads, Tq, Tk);
    use ``NEG_INF`` entries to block positions.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError("query/key/value widths differ")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (x.reshape(1, *x.shape) for x in (q, k, v))
    n, tq, _ = q.shape
    tk = k.shape[1]
    if mask is not None:
        mask = np.asarray(mask, dtype=q.dtype)
        try:
            np.broadcast_shapes(mask.shape, (n, heads, tq, tk))
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with ({n}, {heads}, {tq}, {tk})") from None
    qh = _split_heads(linear(q, params["wq"], params["bq"]), heads)
    kh = _split_heads(linear(k, params["wk"], params["bk"]), heads)
    vh = _split_heads(linear(v, params["wv"], params["bv"]), heads)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // heads))
    if mask is not None:
        scores = scores + mask
    ctx = matmul(softmax(scores, axis=-1), vh)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n, tq, d)
    out = linear(ctx, params["wo"], params["bo"])
    return out.reshape(tq, d) if squeeze else out


# -- transformer layers -------------------------------------------------------------------


def init_layer_norm(scope: Scope, d: int) -> None:
    scope.add("gamma", (d,), "ones")
    scope.add("beta", (d,), "zeros")


def apply_layer_norm(x: Tensor, scope: Scope) -> Tensor:
    return layer_norm(x, scope["gamma"], scope["beta"])


def init_feed_forward(scope: Scope, d: int, hidden: int, rng: SplitMix64) -> None:
    scope.add("w1", (d, hidden), "glorot", rng)
    scope.add("b1", (hidden,), "zeros")
    scope.add("w2", (hidden, d), "glorot", rng)
    scope.add("b2", (d,), "zeros")


def feed_forward(x: Tensor, scope: Scope) -> Tensor:
    return linear(relu(linear(x, scope["w1"], scope["b1"])), scope["w2"], scope["b2"])


def init_encoder_layer(scope: Scope, d: int, hidden: int, rng: SplitMix64) -> None:
    init_layer_norm(scope.scoped("ln1"), d)
    init_attention(scope.scoped("attn"), d, rng)
    init_layer_norm(scope.scoped("ln2"), d)
    init_feed_forward(scope.scoped("ff"), d, hidden, rng)


def encoder_layer(x: Tensor, heads: int, params: Scope, mask=None) -> Tensor:
    """Pre-norm self-attention and feed-forward, each with a residual."""
    h = apply_layer_norm(x, params.scoped("ln1"))
    x = x + multi_head_attention(h, h, h, heads, params.scoped("attn"), mask)
    h = apply_layer_norm(x, params.scoped("ln2"))
    return x + feed_forward(h, params.scoped("ff"))


def init_decoder_layer(scope: Scope, d: int, hidden: int, rng: SplitMix64) -> None:
    init_layer_norm(scope.scoped("ln1"), d)
    init_attention(scope.scoped("self"), d, rng)
    init_layer_norm(scope.scoped("ln2"), d)
    init_attention(scope.scoped("cross"), d, rng)
    init_layer_norm(scope.scoped("ln3"), d)
    init_feed_forward(scope.scoped("ff"), d, hidden, rng)


def decoder_layer(y: Tensor, memory: Tensor, heads: int, params: Scope, memory_mask=None) -> Tensor:
    t = y.shape[1]
    h = apply_layer_norm(y, params.scoped("ln1"))
    y = y + multi_head_attention(h, h, h, heads, params.scoped("self"), causal_mask(t))
    h = apply_layer_norm(y, params.scoped("ln2"))
    y = y + multi_head_attention(h, memory, memory, heads, params.scoped("cross"), memory_mask)
    h = apply_layer_norm(y, params.scoped("ln3"))
    return y + feed_forward(h, params.scoped("ff"))


def init_decoder(scope: Scope, d: int, hidden: int, layers: int, vocab: int, rng: SplitMix64) -> None:
    for i in range(layers):
        init_decoder_layer(scope.scoped(f"layer{i}"), d, hidden, rng)
    init_layer_norm(scope.scoped("ln_out"), d)
    scope.add("w_out", (d, vocab), "glorot", rng)
    scope.add("b_out", (vocab,), "zeros")


def decoder_step(y_prefix: Tensor, memory: Tensor, heads: int, layers: int, params: Scope, memory_mask=None) -> Tensor:
    """Embedded answer prefix (N, t, d) and encoder memory (N, m, d) -> logits (N, t, vocab)."""
    if y_prefix.shape[-2] == 0:
        raise ValueError("decoder_step needs a non-empty prefix")
    squeeze = y_prefix.ndim == 2
    if squeeze:
        y_prefix = y_prefix.reshape(1, *y_prefix.shape)
        memory = memory.reshape(1, *memory.shape)
    y = y_prefix
    for i in range(layers):
        y = decoder_layer(y, memory, heads, params.scoped(f"layer{i}"), memory_mask)
    y = apply_layer_norm(y, params.scoped("ln_out"))
    logits = linear(y, params["w_out"], params["b_out"])
    return logits.reshape(logits.shape[1:]) if squeeze else logits


# -- visual embedders -----------------------------------------------------------------------


def extract_patches(images: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, 3) -> (N, H/p, W/p, p*p*3), patch pixels flattened row-major."""
    n, h, w, ch = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    x = images.reshape(n, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h // p, w // p, p * p * ch)


def extract_tubelets(videos: np.ndarray, pt: int, p: int) -> np.ndarray:
    """(N, T, H, W, 3) -> (N, T/pt, H/p, W/p, pt*p*p*3)."""
    n, t, h, w, ch = videos.shape
    if t % pt or h % p or w % p:
        raise ValueError(f"video {t}x{h}x{w} not divisible by tubelet ({pt}, {p})")
    x = videos.reshape(n, t // pt, pt, h // p, p, w // p, p, ch).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(n, t // pt, h // p, w // p, pt * p * p * ch)


def init_patch_embed(scope: Scope, patch_dim: int, grid: tuple[int, ...], d: int, rng: SplitMix64) -> None:
    scope.add("w", (patch_dim, d), "glorot", rng)
    scope.add("b", (d,), "zeros")
    scope.add("pos", (*grid, d), "zeros")


def patch_embed(images: np.ndarray, p: int, params: Scope, add_position: bool = True) -> Tensor:
    """Images (N, H, W, 3) in [0, 1] -> FeatureMap (N, H/p, W/p, C)."""
    patches = Tensor(extract_patches(np.asarray(images), p), dtype=params["w"].dtype)
    x = linear(patches, params["w"], params["b"])
    return x + params["pos"] if add_position else x


def frame_embed(videos: np.ndarray, pt: int, p: int, params: Scope, add_position: bool = True) -> Tensor:
    """Videos (N, T, H, W, 3) in [0, 1] -> FeatureMap (N, T/pt, H/p, W/p, C)."""
    tubes = Tensor(extract_tubelets(np.asarray(videos), pt, p), dtype=params["w"].dtype)
    x = linear(tubes, params["w"], params["b"])
    return x + params["pos"] if add_position else x


def concat_seq(parts: list[Tensor]) -> Tensor:
    return concat(parts, axis=1)
