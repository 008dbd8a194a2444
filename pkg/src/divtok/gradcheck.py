"""End-to-end finite-difference check of the full model on a micro config."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from divtok.config import ModelConfig
from divtok.data import END, START
from divtok.model import Batch, build_params, loss, stream_views
from divtok.nn import ParameterStore
from divtok.rng import SplitMix64
from divtok.tensor import finite_difference_grad

MICRO_VOCAB = 12


def micro_config(mode: str = "image", seed: int = 0) -> ModelConfig:
    """C=8, one encoder and one decoder layer, two tokens, 2x2 patch grid, vocab 12."""
    if mode == "image":
        return ModelConfig(
            mode="image", vocab_size=MICRO_VOCAB, width=8, enc_layers=1, dec_layers=1, heads=2, tokens=2,
            ff_hidden=8, map_hidden=8, image_size=4, patch=2, max_question_len=4, max_answer_len=2, seed=seed,
        )
    return ModelConfig(
        mode="video", vocab_size=MICRO_VOCAB, width=8, enc_layers=2, dec_layers=1, heads=2, tokens=2,
        ff_hidden=8, map_hidden=8, frames=4, video_size=4, streams="4x4x4:2x2,2x2x2:1x1",
        max_question_len=4, max_answer_len=2, seed=seed,
    )


def micro_batch(cfg: ModelConfig, n: int = 2, seed: int = 0) -> Batch:
    """Random visuals and random token ids in [4, vocab), with some question padding."""
    rng = SplitMix64(seed)
    if cfg.mode == "image":
        shape = (n, cfg.image_size, cfg.image_size, 3)
    else:
        shape = (n, cfg.frames, cfg.video_size, cfg.video_size, 3)
    visual = (rng.uniform_array(int(np.prod(shape))) * 256).astype(np.uint8).reshape(shape)
    tq = cfg.max_question_len
    q_ids = np.array([[4 + rng.below(cfg.vocab_size - 4) for _ in range(tq)] for _ in range(n)])
    q_valid = np.ones((n, tq), dtype=bool)
    q_valid[0, tq - 1 :] = False
    q_ids[~q_valid] = 0
    answers = np.array([[4 + rng.below(cfg.vocab_size - 4)] for _ in range(n)])
    dec_in = np.concatenate([np.full((n, 1), START), answers], axis=1)
    targets = np.concatenate([answers, np.full((n, 1), END)], axis=1)
    tgt_valid = np.ones_like(targets, dtype=bool)
    tgt_valid[1, 1] = False
    return Batch(stream_views(cfg, visual), q_ids, q_valid, dec_in, targets, tgt_valid, [""] * n)


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst: str
    per_param: dict[str, float]


def check_model_gradients(cfg: ModelConfig, batch: Batch | None = None, lam: float = 0.1, h: float = 1e-5) -> GradCheckResult:
    """Analytic vs central-difference gradients of the full loss, for every parameter.

    Parameters are perturbed away from their (mostly zero) initial biases and
    position embeddings first so that every path carries signal. The error of
    one parameter is max|a - n| / max(max|a|, max|n|) over the whole
    concatenated gradient, which keeps exactly-zero gradients (softmax shift
    invariance) from dividing noise by noise.
    """
    batch = micro_batch(cfg) if batch is None else batch
    params = build_params(cfg, np.float64)
    rng = SplitMix64(cfg.seed + 1)
    for _, t in params.items():
        t.data = t.data + 0.2 * (rng.uniform_array(t.data.size).reshape(t.shape) - 0.5)

    def objective(store: ParameterStore):
        return loss(cfg, store, batch, lam=lam).total

    params.zero_grad()
    objective(params).backward()
    analytic, numeric = {}, {}
    for name, t in params.items():
        analytic[name] = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(x, name=name):
            saved = params[name]
            params[name] = x
            try:
                return objective(params)
            finally:
                params[name] = saved

        numeric[name] = finite_difference_grad(f, t, h)
    scale = max(max(np.abs(a).max() for a in analytic.values()), max(np.abs(n).max() for n in numeric.values()))
    per = {k: float(np.abs(analytic[k] - numeric[k]).max() / scale) for k in analytic}
    worst = max(per, key=per.get)
    return GradCheckResult(per[worst], worst, per)
