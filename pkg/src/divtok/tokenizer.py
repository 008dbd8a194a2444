"""Adaptive tokenization conditioned on text, multi-stream fusion, and
layer-wise re-tokenization.

Shapes used below: N examples, S flattened spatial (or spatio-temporal)
positions, C channels, M tokens, T text positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from divtok.nn import Scope, encoder_layer, init_encoder_layer, key_padding_mask, linear, softmax
from divtok.rng import SplitMix64
from divtok.tensor import Tensor, concat, matmul, relu


@dataclass(frozen=True)
class StreamSpec:
    """One view of the input video at a given spatio-temporal resolution."""

    frames: int
    size: int
    tubelet: int
    patch: int
    tokens: int = 0

    def __post_init__(self):
        if self.frames % self.tubelet or self.size % self.patch:
            raise ValueError(f"stream {self.frames}x{self.size}x{self.size} not divisible by ({self.tubelet}, {self.patch})")

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.frames // self.tubelet, self.size // self.patch, self.size // self.patch)

    @property
    def positions(self) -> int:
        t, h, w = self.grid
        return t * h * w


def split_quota(total: int, streams: int) -> list[int]:
    """Even split of the token budget, remainder to the first stream."""
    if streams < 1 or total < streams:
        raise ValueError(f"cannot split {total} tokens over {streams} streams")
    base, rem = divmod(total, streams)
    return [base + rem] + [base] * (streams - 1)


def flatten_grid(features: Tensor) -> Tensor:
    """FeatureMap (N, ..., C) -> (N, S, C)."""
    n, c = features.shape[0], features.shape[-1]
    return features.reshape(n, -1, c)


def init_map_mlp(scope: Scope, c: int, hidden: int, m: int, rng: SplitMix64) -> None:
    scope.add("w_feat", (c, hidden), "glorot", rng)
    scope.add("w_cond", (c, hidden), "glorot", rng)
    scope.add("b1", (hidden,), "zeros")
    scope.add("w2", (hidden, m), "glorot", rng)
    scope.add("b2", (m,), "zeros")


def spatial_attention_maps(features: Tensor, conditioning: Tensor, m: int, params: Scope) -> Tensor:
    """Per-position MLP over [feature ; conditioning] -> M logits, softmax over positions.

    features: (N, S, C) or a FeatureMap grid; conditioning: (N, C).
    Returns AttentionMaps of shape (N, M, S).
    """
    if features.ndim != 3:
        features = flatten_grid(features)
    c = features.shape[-1]
    if params["w_feat"].shape[0] != c or params["w_cond"].shape[0] != conditioning.shape[-1]:
        raise ValueError("channel mismatch between features/conditioning and map parameters")
    if params["w2"].shape[1] != m:
        raise ValueError(f"map MLP emits {params['w2'].shape[1]} logits, asked for {m}")
    n = features.shape[0]
    # concat([f, cond]) @ [[w_feat], [w_cond]] without materializing the concat
    cond = linear(conditioning, params["w_cond"], params["b1"]).reshape(n, 1, -1)
    hidden = relu(linear(features, params["w_feat"]) + cond)
    logits = linear(hidden, params["w2"], params["b2"])
    return softmax(logits.transpose(0, 2, 1), axis=-1)


def tokenize(features: Tensor, maps: Tensor) -> Tensor:
    """z_i[c] = mean_s features[s, c] * maps[i, s]  ->  TokenSet (N, M, C)."""
    if features.ndim != 3:
        features = flatten_grid(features)
    s = features.shape[1]
    if maps.shape[-1] != s:
        raise ValueError(f"maps cover {maps.shape[-1]} positions, features have {s}")
    return matmul(maps, features) * (1.0 / s)


def init_fusion(scope: Scope, c: int, rng: SplitMix64) -> None:
    scope.add("w", (c, c), "glorot", rng)
    scope.add("b", (c,), "zeros")


def fuse_streams(tokensets: list[Tensor], params: Scope) -> Tensor:
    """Concatenate per-stream tokens in declaration order, then a shared C->C projection."""
    if not tokensets:
        raise ValueError("no token sets to fuse")
    n, _, c = tokensets[0].shape
    for ts in tokensets[1:]:
        if ts.shape[0] != n or ts.shape[2] != c:
            raise ValueError("token sets disagree on batch size or channels")
    joined = tokensets[0] if len(tokensets) == 1 else concat(tokensets, axis=1)
    return linear(joined, params["w"], params["b"])


def masked_mean(seq: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over valid positions of (N, T, C) -> (N, C)."""
    w = np.asarray(valid, dtype=seq.dtype)
    w = w / w.sum(axis=1, keepdims=True)
    return (seq * w[:, :, None]).sum(axis=1)


def init_co_tokenizer_layer(scope: Scope, c: int, hidden: int, ff_hidden: int, quotas: list[int], rng: SplitMix64) -> None:
    for s, m in enumerate(quotas):
        init_map_mlp(scope.scoped(f"tok/stream{s}"), c, hidden, m, rng)
    init_fusion(scope.scoped("fuse"), c, rng)
    init_encoder_layer(scope.scoped("block"), c, ff_hidden, rng)


def co_tokenize_iterative(
    streams: list[Tensor],
    text: Tensor,
    text_valid: np.ndarray,
    layers: int,
    quotas: list[int],
    heads: int,
    params: Scope,
) -> tuple[Tensor, list[list[Tensor]]]:
    """Re-tokenize the visual streams at every layer, conditioned on the running sequence.

    Layer l pools its conditioning vector from the previous output (layer 0:
    the text embeddings), builds per-stream maps and tokens, fuses them and
    runs one encoder layer over [text half ; fused tokens].

    Returns the final (N, T + M, C) sequence and, per layer, the list of
    per-stream AttentionMaps.
    """
    if layers < 1:
        raise ValueError("need at least one layer")
    if not streams:
        raise ValueError("need at least one visual stream")
    if text.shape[1] == 0:
        raise ValueError("empty text")
    if len(quotas) != len(streams):
        raise ValueError("one token quota per stream required")
    n, t, _ = text.shape
    text_valid = np.asarray(text_valid, dtype=bool)
    m_total = sum(quotas)
    seq_valid = np.concatenate([text_valid, np.ones((n, m_total), dtype=bool)], axis=1)
    attn_mask = key_padding_mask(seq_valid)
    flat = [s if s.ndim == 3 else flatten_grid(s) for s in streams]

    prev, prev_valid = text, text_valid
    maps_per_layer: list[list[Tensor]] = []
    for layer in range(layers):
        scope = params.scoped(f"layer{layer}")
        cond = masked_mean(prev, prev_valid)
        layer_maps, tokensets = [], []
        for s, (feat, m) in enumerate(zip(flat, quotas)):
            maps = spatial_attention_maps(feat, cond, m, scope.scoped(f"tok/stream{s}"))
            layer_maps.append(maps)
            tokensets.append(tokenize(feat, maps))
        fused = fuse_streams(tokensets, scope.scoped("fuse"))
        text_half = prev if layer == 0 else prev[:, :t]
        seq = concat([text_half, fused], axis=1)
        prev = encoder_layer(seq, heads, scope.scoped("block"), attn_mask)
        prev_valid = seq_valid
        maps_per_layer.append(layer_maps)
    return prev, maps_per_layer


@dataclass
class TokenMass:
    max_weight: np.ndarray  # (N, M)
    entropy: np.ndarray  # (N, M)
    empty: np.ndarray  # (N, M) bool
    count: int


def token_mass_diagnostic(maps, tau: float = 0.5) -> TokenMass:
    """Flag tokens whose peak weight stays below (1 + tau) / S, i.e. near-uniform maps."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    a = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype=np.float64)
    s = a.shape[-1]
    peak = a.max(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(a > 0, a * np.log(a), 0.0)
    entropy = -plogp.sum(axis=-1)
    empty = peak < (1.0 + tau) / s
    return TokenMass(peak, entropy, empty, int(empty.sum()))
