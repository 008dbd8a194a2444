"""Adam with decoupled weight decay, the training loop, and QA metrics."""

from __future__ import annotations

import logging
import re
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from divtok.config import RunConfig
from divtok.data import Example
from divtok.diversity import mean_off_diagonal, pairwise_overlap_matrix, select_layers
from divtok.model import (
    OPT_MAGIC,
    Batch,
    CheckpointError,
    _decode_tensors,
    _encode_tensors,
    _frame,
    _unframe,
    build_params,
    collate,
    generate_batch,
    loss,
)
from divtok.nn import ParameterStore
from divtok.rng import MASK, SplitMix64, mix64
from divtok.tensor import NonFiniteError, no_grad
from divtok.tokenizer import token_mass_diagnostic

log = logging.getLogger(__name__)


# -- optimizer ------------------------------------------------------------------------------


@dataclass
class TrainingState:
    params: ParameterStore
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    rng_state: int = 0
    config: RunConfig | None = None

    @classmethod
    def fresh(cls, params: ParameterStore, rng_state: int = 0, config: RunConfig | None = None) -> "TrainingState":
        m = {k: np.zeros_like(t.data) for k, t in params.items()}
        v = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(params, m, v, 0, rng_state, config)


def adam_step(
    state: TrainingState,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> TrainingState:
    """One bias-corrected Adam update, preceded by decoupled decay p <- p - lr*wd*p. Mutates ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step}")
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {state.params[name].shape}")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m = state.m[name] = (beta1 * state.m[name] + (1.0 - beta1) * g).astype(dt)
        v = state.v[name] = (beta2 * state.v[name] + (1.0 - beta2) * g * g).astype(dt)
        data = p.data
        if weight_decay:
            data = data * (1.0 - lr * weight_decay)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (data - update).astype(dt)
    state.step = t
    return state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


# -- metrics ---------------------------------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(s: str) -> str:
    return " ".join(_PUNCT.sub("", s.lower()).split())


def exact_match(pred: str, golds: list[str]) -> int:
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred: list[str], gold: list[str]) -> float:
    if not pred and not gold:
        return 1.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: list[str]) -> float:
    """Bag-of-tokens F1, best over the gold answers."""
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(pred).split()
    return max(_f1(p, normalize_answer(g).split()) for g in golds)


@dataclass
class MetricsReport:
    em: float
    f1: float
    task_loss: float
    div_loss: float
    mean_overlap: float
    empty_tokens: int
    count: int
    predictions: list[str] = field(default_factory=list, repr=False)

    def row(self, step: int) -> str:
        return "\t".join(
            [
                str(step),
                f"{self.task_loss:.9g}",
                f"{self.div_loss:.9g}",
                f"{self.mean_overlap:.9g}",
                f"{self.em:.9g}",
                f"{self.f1:.9g}",
                str(self.empty_tokens),
            ]
        )


METRICS_HEADER = "step\ttask_loss\tdiv_loss\tmean_overlap\tem\tf1\tempty_tokens"


def evaluate(cfg: RunConfig, params: ParameterStore, dataset, batch_size: int = 64) -> MetricsReport:
    """Greedy-decode every example and aggregate EM/F1 plus attention-map diagnostics."""
    if isinstance(dataset, list):
        if not dataset:
            raise ValueError("cannot evaluate an empty dataset")
        dataset = collate(cfg.model, dataset)
    n = len(dataset)
    preds: list[str] = []
    task_sum = div_sum = overlap_sum = 0.0
    empty = 0
    with no_grad():
        for lo in range(0, n, batch_size):
            sub = dataset.take(np.arange(lo, min(n, lo + batch_size)))
            preds += generate_batch(cfg.model, params, sub)
            parts = loss(cfg.model, params, sub, lam=0.0)
            k = len(sub)
            task_sum += parts.task * k
            chosen = select_layers(parts.maps, cfg.model.div_layers)
            div_sum += parts.div * k
            overlap_sum += k * float(np.mean([mean_off_diagonal(pairwise_overlap_matrix(m)) for m in chosen]))
            empty += sum(token_mass_diagnostic(m, cfg.train.tau).count for m in parts.maps[-1])
    ems = [exact_match(p, [g]) for p, g in zip(preds, dataset.answers)]
    f1s = [token_f1(p, [g]) for p, g in zip(preds, dataset.answers)]
    return MetricsReport(
        em=float(np.mean(ems)),
        f1=float(np.mean(f1s)),
        task_loss=task_sum / n,
        div_loss=div_sum / n,
        mean_overlap=overlap_sum / n,
        empty_tokens=empty,
        count=n,
        predictions=preds,
    )


# -- training loop ----------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: TrainingState):
        super().__init__(msg)
        self.last_good = last_good


def _snapshot(state: TrainingState) -> TrainingState:
    return TrainingState(
        state.params.copy(),
        {k: v.copy() for k, v in state.m.items()},
        {k: v.copy() for k, v in state.v.items()},
        state.step,
        state.rng_state,
        state.config,
    )


def sampler_seed(model_seed: int) -> int:
    return mix64((model_seed ^ 0x5DEECE66D) & MASK)


class BatchSampler:
    """Batches as a pure function of (seed, step), so training resumes from the step alone.

    Examples are drawn from a stream of epochs, each epoch a SplitMix64
    shuffle seeded by ``mix64(seed + epoch)``; step t takes stream positions
    [t*B, (t+1)*B).
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, min(batch_size, n), seed
        self._cache: dict[int, list[int]] = {}

    def _epoch(self, e: int) -> list[int]:
        if e not in self._cache:
            self._cache = {e: SplitMix64(mix64((self.seed + e) & MASK)).shuffle(list(range(self.n)))}
        return self._cache[e]

    def batch(self, step: int) -> np.ndarray:
        start = step * self.batch_size
        return np.array([self._epoch(k // self.n)[k % self.n] for k in range(start, start + self.batch_size)])


def train(
    cfg: RunConfig,
    train_set: list[Example] | Batch,
    val_set: list[Example] | Batch | None = None,
    state: TrainingState | None = None,
    on_eval=None,
) -> tuple[TrainingState, list[str]]:
    """Fixed-step training with evaluation every ``eval_every`` steps and at the end.

    Returns the final state and the metrics log rows (tab-separated, no
    header). ``on_eval(step, report)`` is called after each evaluation.
    """
    mc, tc = cfg.model, cfg.train
    dtype = np.dtype(tc.dtype)
    train_batch = collate(mc, train_set) if isinstance(train_set, list) else train_set
    if len(train_batch) == 0:
        raise ValueError("empty training set")
    val_batch = None
    if val_set is not None and len(val_set):
        val_batch = collate(mc, val_set) if isinstance(val_set, list) else val_set
    if state is None:
        state = TrainingState.fresh(build_params(mc, dtype), sampler_seed(mc.seed), cfg)
    sampler = BatchSampler(len(train_batch), tc.batch_size, state.rng_state)
    rows: list[str] = []
    last_good = _snapshot(state)

    def do_eval():
        report = evaluate(cfg, state.params, val_batch if val_batch is not None else train_batch)
        rows.append(report.row(state.step))
        log.info("eval %s", rows[-1])
        if on_eval is not None:
            on_eval(state.step, report)

    while state.step < tc.steps:
        idx = sampler.batch(state.step)
        state.params.zero_grad()
        try:
            parts = loss(mc, state.params, train_batch.take(idx))
            if not np.isfinite(float(parts.total.data)):
                raise NonFiniteError("loss is not finite")
            parts.total.backward()
            grads = {k: t.grad for k, t in state.params.items() if t.grad is not None}
            clip_by_global_norm(grads, tc.clip_norm)
            adam_step(state, grads, tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
        except FloatingPointError as e:
            raise TrainingDiverged(f"step {state.step + 1}: {e}", last_good) from e
        if state.step % tc.eval_every == 0 or state.step == tc.steps:
            do_eval()
            last_good = _snapshot(state)
    if not rows:
        do_eval()
    return state, rows


# -- optimizer sidecar -----------------------------------------------------------------------


def encode_optimizer(state: TrainingState) -> bytes:
    items = [(f"m/{k}", v) for k, v in state.m.items()] + [(f"v/{k}", v) for k, v in state.v.items()]
    header = struct.pack("<QQ", state.step, state.rng_state)
    return _frame(OPT_MAGIC, header, _encode_tensors(items))


def decode_optimizer(buf: bytes, params: ParameterStore) -> TrainingState:
    pos = _unframe(buf, OPT_MAGIC)
    step, rng_state = struct.unpack_from("<QQ", buf, pos)
    items, end = _decode_tensors(buf, pos + 16)
    if end != len(buf) - 4:
        raise CheckpointError("trailing bytes in optimizer file")
    m, v = {}, {}
    for name, arr in items:
        kind, _, pname = name.partition("/")
        if pname not in params:
            raise CheckpointError(f"optimizer entry {name!r} has no parameter")
        (m if kind == "m" else v)[pname] = arr.astype(params.dtype)
    if set(m) != set(params.names()) or set(v) != set(params.names()):
        raise CheckpointError("optimizer moments do not cover every parameter")
    return TrainingState(params, m, v, step, rng_state)


def save_optimizer(path, state: TrainingState) -> None:
    Path(path).write_bytes(encode_optimizer(state))


def load_optimizer(path, params: ParameterStore) -> TrainingState:
    return decode_optimizer(Path(path).read_bytes(), params)
