"""Encoder-decoder QA model over adaptive vision-language tokens.

Pipeline: visual embedders (one per stream) and a text embedding table feed
the co-tokenizing encoder; the decoder cross-attends to the encoder output
and emits answer tokens. Image mode tokenizes once and follows with plain
encoder layers; video mode re-tokenizes at every encoder layer.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from divtok import nn
from divtok.config import ModelConfig
from divtok.data import END, PAD, START, Example, detokenize, text_tokenize
from divtok.diversity import combined_loss, diversity_loss, select_layers
from divtok.nn import ParameterStore, Scope
from divtok.rng import SplitMix64
from divtok.tensor import Tensor, no_grad, take_last
from divtok.tokenizer import co_tokenize_iterative, init_co_tokenizer_layer

__all__ = ["Example", "build_params", "forward", "loss", "generate", "collate"]


# -- parameters -------------------------------------------------------------------


def build_params(cfg: ModelConfig, dtype=np.float64) -> ParameterStore:
    """Fresh parameters for ``cfg``; initialization is fully determined by ``cfg.seed``."""
    rng = SplitMix64(cfg.seed)
    store = ParameterStore(dtype)
    c = cfg.width
    text = store.scoped("text")
    text.add("embed", (cfg.vocab_size, c), "glorot", rng)
    text.add("pos", (cfg.max_question_len, c), "zeros")
    for s, spec in enumerate(cfg.stream_specs):
        scope = store.scoped(f"visual/stream{s}")
        if cfg.mode == "image":
            grid = (spec.size // spec.patch, spec.size // spec.patch)
            nn.init_patch_embed(scope, spec.patch * spec.patch * 3, grid, c, rng)
        else:
            nn.init_patch_embed(scope, spec.tubelet * spec.patch * spec.patch * 3, spec.grid, c, rng)
    enc = store.scoped("encoder")
    tok_layers = cfg.enc_layers if cfg.is_iterative else 1
    for layer in range(cfg.enc_layers):
        scope = enc.scoped(f"layer{layer}")
        if layer < tok_layers:
            init_co_tokenizer_layer(scope, c, cfg.map_hidden, cfg.ff_hidden, cfg.quotas, rng)
        else:
            nn.init_encoder_layer(scope.scoped("block"), c, cfg.ff_hidden, rng)
    nn.init_layer_norm(enc.scoped("ln_out"), c)
    ans = store.scoped("answer")
    ans.add("embed", (cfg.vocab_size, c), "glorot", rng)
    ans.add("pos", (cfg.max_answer_len + 1, c), "zeros")
    nn.init_decoder(store.scoped("decoder"), c, cfg.ff_hidden, cfg.dec_layers, cfg.vocab_size, rng)
    return store


# -- batching ----------------------------------------------------------------------


def stream_views(cfg: ModelConfig, visual: np.ndarray) -> list[np.ndarray]:
    """uint8 batch (N, H, W, 3) or (N, T, H, W, 3) -> per-stream float arrays in [0, 1]."""
    x = np.asarray(visual, dtype=np.float64) / 255.0
    if cfg.mode == "image":
        if x.ndim != 4:
            raise ValueError(f"image mode expects (N, H, W, 3), got {x.shape}")
        return [x]
    if x.ndim != 5:
        raise ValueError(f"video mode expects (N, T, H, W, 3), got {x.shape}")
    n, t, h, w, ch = x.shape
    views = []
    for spec in cfg.stream_specs:
        if t % spec.frames or h % spec.size:
            raise ValueError(f"video {t}x{h}x{w} cannot be resampled to stream {spec}")
        v = x[:, :: t // spec.frames]
        f = h // spec.size
        if f > 1:
            v = v.reshape(n, spec.frames, spec.size, f, spec.size, f, ch).mean(axis=(3, 5))
        views.append(v)
    return views


@dataclass
class Batch:
    streams: list[np.ndarray]
    q_ids: np.ndarray  # (N, Tq)
    q_valid: np.ndarray  # (N, Tq) bool
    dec_in: np.ndarray  # (N, t)
    targets: np.ndarray  # (N, t)
    tgt_valid: np.ndarray  # (N, t) bool
    answers: list[str]

    def __len__(self) -> int:
        return len(self.q_ids)

    def take(self, idx) -> "Batch":
        """Sub-batch, trimmed to its own longest question and answer."""
        idx = np.asarray(idx)
        qv, tv = self.q_valid[idx], self.tgt_valid[idx]
        tq = max(int(qv.sum(axis=1).max()), 1)
        ta = int(tv.sum(axis=1).max())
        return Batch(
            [s[idx] for s in self.streams],
            self.q_ids[idx, :tq],
            qv[:, :tq],
            self.dec_in[idx, :ta],
            self.targets[idx, :ta],
            tv[:, :ta],
            [self.answers[i] for i in idx],
        )


def _pad(rows: list[list[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(cfg: ModelConfig, examples: list[Example]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    shapes = {ex.visual.shape for ex in examples}
    if len(shapes) != 1:
        raise ValueError(f"inhomogeneous visual shapes {shapes}")
    qs = [ex.question_ids for ex in examples]
    ans = [ex.answer_ids for ex in examples]
    for q, a in zip(qs, ans):
        if not a:
            raise ValueError("answer must be non-empty")
        if len(q) > cfg.max_question_len:
            raise ValueError(f"question longer than {cfg.max_question_len} tokens")
        if len(a) > cfg.max_answer_len:
            raise ValueError(f"answer longer than {cfg.max_answer_len} tokens")
        if max(q + a, default=0) >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
    tq = max(max(len(q) for q in qs), 1)
    ta = max(len(a) for a in ans) + 1
    q_ids = _pad(qs, tq)
    dec_in = _pad([[START] + a for a in ans], ta)
    targets = _pad([a + [END] for a in ans], ta)
    return Batch(
        stream_views(cfg, np.stack([ex.visual for ex in examples])),
        q_ids,
        _pad([[1] * len(q) for q in qs], tq).astype(bool),
        dec_in,
        targets,
        _pad([[1] * (len(a) + 1) for a in ans], ta).astype(bool),
        [ex.answer for ex in examples],
    )


# -- forward ---------------------------------------------------------------------------


def embed_visual(cfg: ModelConfig, params: ParameterStore, streams: list[np.ndarray]) -> list[Tensor]:
    feats = []
    for s, (spec, view) in enumerate(zip(cfg.stream_specs, streams)):
        scope = params.scoped(f"visual/stream{s}")
        if cfg.mode == "image":
            feats.append(nn.patch_embed(view, spec.patch, scope))
        else:
            feats.append(nn.frame_embed(view, spec.tubelet, spec.patch, scope))
    return feats


def embed_text(params: Scope, ids: np.ndarray) -> Tensor:
    t = ids.shape[1]
    return nn.embed(params["embed"], ids) + params["pos"][:t]


def encode(cfg: ModelConfig, params: ParameterStore, batch: Batch) -> tuple[Tensor, np.ndarray, list[list[Tensor]]]:
    """Encoder memory (N, Tq + M, C), its validity mask, and per-layer attention maps."""
    if not batch.q_valid.any(axis=1).all():
        raise ValueError("every example needs a non-empty question")
    feats = embed_visual(cfg, params, batch.streams)
    text = embed_text(params.scoped("text"), batch.q_ids)
    enc = params.scoped("encoder")
    tok_layers = cfg.enc_layers if cfg.is_iterative else 1
    seq, maps = co_tokenize_iterative(feats, text, batch.q_valid, tok_layers, cfg.quotas, cfg.heads, enc)
    n = len(batch)
    valid = np.concatenate([batch.q_valid, np.ones((n, cfg.num_tokens), dtype=bool)], axis=1)
    mask = nn.key_padding_mask(valid)
    for layer in range(tok_layers, cfg.enc_layers):
        seq = nn.encoder_layer(seq, cfg.heads, enc.scoped(f"layer{layer}/block"), mask)
    return nn.apply_layer_norm(seq, enc.scoped("ln_out")), valid, maps


def decode(cfg: ModelConfig, params: ParameterStore, prefix: np.ndarray, memory: Tensor, memory_valid: np.ndarray) -> Tensor:
    y = embed_text(params.scoped("answer"), prefix)
    return nn.decoder_step(y, memory, cfg.heads, cfg.dec_layers, params.scoped("decoder"), nn.key_padding_mask(memory_valid))


def forward(cfg: ModelConfig, params: ParameterStore, batch) -> tuple[Tensor, list[list[Tensor]]]:
    """Teacher-forced logits (N, t, vocab) and per-layer, per-stream attention maps."""
    if isinstance(batch, list):
        batch = collate(cfg, batch)
    memory, valid, maps = encode(cfg, params, batch)
    return decode(cfg, params, batch.dec_in, memory, valid), maps


@dataclass
class LossParts:
    total: Tensor
    task: float
    div: float
    maps: list[list[Tensor]]


def task_cross_entropy(logits: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-example mean token cross-entropy over non-pad targets, averaged over the batch."""
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("answer is all padding")
    lp = take_last(nn.log_softmax(logits, axis=-1), targets)
    w = (valid / counts[:, None] / len(counts)).astype(logits.dtype)
    return -(lp * w).sum()


def loss(cfg: ModelConfig, params: ParameterStore, batch, lam: float | None = None) -> LossParts:
    if isinstance(batch, list):
        batch = collate(cfg, batch)
    lam = cfg.lam if lam is None else lam
    logits, maps = forward(cfg, params, batch)
    task = task_cross_entropy(logits, batch.targets, batch.tgt_valid)
    total = combined_loss(task, maps, lam, cfg.div_layers)
    with no_grad():
        chosen = select_layers(maps, cfg.div_layers)
        div = sum(float(diversity_loss(m.detach()).data) for m in chosen) / len(chosen)
    return LossParts(total, float(task.data), div, maps)


# -- decoding ---------------------------------------------------------------------------


def generate_batch(cfg: ModelConfig, params: ParameterStore, batch: Batch) -> list[str]:
    """Greedy decoding for every example in ``batch``."""
    with no_grad():
        memory, valid, _ = encode(cfg, params, batch)
        n = len(batch)
        prefix = np.full((n, 1), START, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        out: list[list[int]] = [[] for _ in range(n)]
        for _ in range(cfg.max_answer_len):
            logits = decode(cfg, params, prefix, memory, valid)
            nxt = logits.data[:, -1].argmax(axis=-1)
            for i in range(n):
                if not done[i]:
                    if nxt[i] == END:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return [detokenize(ids) for ids in out]


def generate(cfg: ModelConfig, params: ParameterStore, visual: np.ndarray, question: str) -> str:
    """Greedy answer string for one image/video and question."""
    ex = Example(np.asarray(visual), question, "x")
    batch = collate(cfg, [ex])
    if not text_tokenize(question):
        raise ValueError("empty question")
    return generate_batch(cfg, params, batch)[0]


# -- checkpoints ---------------------------------------------------------------------------

CKPT_MAGIC = b"DTOK"
OPT_MAGIC = b"DOPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_tensors(items) -> bytes:
    out = bytearray(struct.pack("<I", len(items)))
    for name, arr in items:
        b = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(b)) + b
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def _decode_tensors(buf: bytes, pos: int) -> tuple[list[tuple[str, np.ndarray]], int]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    items = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        items.append((name, arr))
    return items, pos


def _frame(magic: bytes, header: bytes, body: bytes) -> bytes:
    out = magic + struct.pack("<I", CKPT_VERSION) + header + body
    return out + struct.pack("<I", zlib.crc32(out))


def _unframe(buf: bytes, magic: bytes) -> int:
    if len(buf) < 12 or buf[:4] != magic:
        raise CheckpointError(f"not a {magic.decode()} file")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("CRC mismatch")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    return 8


def encode_checkpoint(params: ParameterStore) -> bytes:
    return _frame(CKPT_MAGIC, b"", _encode_tensors([(k, t.data) for k, t in params.items()]))


def decode_checkpoint(buf: bytes, dtype=np.float64) -> ParameterStore:
    pos = _unframe(buf, CKPT_MAGIC)
    items, pos = _decode_tensors(buf, pos)
    if pos != len(buf) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    store = ParameterStore(dtype)
    for name, arr in items:
        store._params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return store


def save_checkpoint(path, params: ParameterStore) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, cfg: ModelConfig | None = None, dtype=np.float64) -> ParameterStore:
    """Read a DTOK file; with ``cfg`` given, verify names and shapes match that model."""
    store = decode_checkpoint(Path(path).read_bytes(), dtype)
    if cfg is not None:
        check_compatible(cfg, store)
    return store


def check_compatible(cfg: ModelConfig, store: ParameterStore) -> None:
    ref = build_params(cfg)
    want = [(k, t.shape) for k, t in ref.items()]
    got = [(k, t.shape) for k, t in store.items()]
    if want != got:
        missing = {k for k, _ in want} ^ {k for k, _ in got}
        detail = f"differing names {sorted(missing)[:5]}" if missing else "shape mismatch"
        raise CheckpointError(f"checkpoint does not match model config: {detail}")
