"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
Run standalone with ``python3 tests/test_acceptance.py``.
"""

import hashlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from divtok import diversity as dv
from divtok import nn
from divtok import tensor as T
from divtok import tokenizer as tk
from divtok.config import ModelConfig, RunConfig, TrainConfig
from divtok.data import Example, decode_dataset, encode_dataset, gen_image_example, gen_video_example, make_split
from divtok.gradcheck import check_model_gradients, micro_config
from divtok.model import decode_checkpoint, encode_checkpoint
from divtok.nn import ParameterStore
from divtok.rng import SplitMix64
from divtok.tensor import Tensor
from divtok.train import TrainingState, adam_step, evaluate, train
from gradutil import grad_check
from test_data import GOLDEN_SHA256, TESTDATA
from test_diversity import loop_diversity
from test_nn import naive_attention, randomize
from test_tensor import loop_matmul
from test_tokenizer import loop_tokenize

RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def rel(got, want):
    return float(np.abs(np.asarray(got) - want).max() / max(np.abs(want).max(), 1e-300))


def test_oracle_equivalence():
    t0 = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(2024)
    for i in range(100):
        n, m, s, c = (int(v) for v in rng.integers(1, 5, size=4))
        maps = rng.dirichlet(np.ones(s + 1), size=(n, m + 1))
        worst["diversity_loss"] = max(worst.get("diversity_loss", 0), abs(dv.diversity_loss(maps).item() - loop_diversity(maps)) / loop_diversity(maps))
        o = dv.pairwise_overlap_matrix(maps)
        loop_o = np.array([[[sum(maps[k, a, p] * maps[k, b, p] for p in range(s + 1)) ** 2 for b in range(m + 1)] for a in range(m + 1)] for k in range(n)])
        worst["pairwise_overlap_matrix"] = max(worst.get("pairwise_overlap_matrix", 0), rel(o, loop_o))
        feats = rng.normal(size=(n, s + 1, c))
        worst["tokenize"] = max(worst.get("tokenize", 0), rel(tk.tokenize(Tensor(feats), Tensor(maps)).data, loop_tokenize(feats, maps)))
        a, b = rng.normal(size=(m + 1, s + 1)), rng.normal(size=(s + 1, c))
        worst["matmul"] = max(worst.get("matmul", 0), rel(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b)))
        store = ParameterStore()
        nn.init_attention(store.scoped("a"), 4, SplitMix64(i))
        randomize(store, i, 0.5)
        x, kv = rng.normal(size=(m + 1, 4)), rng.normal(size=(s + 1, 4))
        got = nn.multi_head_attention(Tensor(x), Tensor(kv), Tensor(kv), 2, store.scoped("a")).data
        worst["attention"] = max(worst.get("attention", 0), rel(got, naive_attention(x, kv, 2, store.scoped("a"))))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("oracle equivalence", max(worst.values()) <= 1e-10 and elapsed < 60, f"100 instances each, max rel err {detail}; {elapsed:.1f}s")


def _block_cases():
    rng = np.random.default_rng(5)

    def store_for(init, *args):
        s = ParameterStore()
        init(s.scoped("p"), *args, SplitMix64(1))
        randomize(s, 3, 0.4)
        return s, s.scoped("p")

    x = Tensor(rng.normal(size=(2, 3, 4)))
    kv = Tensor(rng.normal(size=(2, 5, 4)))
    probe4 = Tensor(rng.normal(size=(2, 3, 4)))
    mask = nn.key_padding_mask(np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]]))
    cases = []

    s, p = store_for(lambda scope, _rng: nn.init_layer_norm(scope, 4))
    cases.append(("layer_norm", s, lambda p=p: (nn.apply_layer_norm(x, p) * probe4).sum()))
    s, p = store_for(nn.init_feed_forward, 4, 6)
    cases.append(("feed_forward", s, lambda p=p: (nn.feed_forward(x, p) * probe4).sum()))
    s, p = store_for(nn.init_attention, 4)
    cases.append(("attention", s, lambda p=p: (nn.multi_head_attention(x, kv, kv, 2, p, mask) * probe4).sum()))
    s, p = store_for(nn.init_encoder_layer, 4, 6)
    cases.append(("encoder_layer", s, lambda p=p: (nn.encoder_layer(x, 2, p) * probe4).sum()))
    s, p = store_for(nn.init_decoder_layer, 4, 6)
    cases.append(("decoder_layer", s, lambda p=p: (nn.decoder_layer(x, kv, 2, p, mask) * probe4).sum()))
    s = ParameterStore()
    nn.init_decoder(s.scoped("p"), 4, 6, 1, 5, SplitMix64(2))
    randomize(s, 4, 0.4)
    probe5 = Tensor(rng.normal(size=(2, 3, 5)))
    cases.append(("decoder", s, lambda p=s.scoped("p"): (nn.decoder_step(x, kv, 2, 1, p, mask) * probe5).sum()))
    img = rng.uniform(size=(2, 4, 4, 3))
    s, p = store_for(nn.init_patch_embed, 12, (2, 2), 4)
    probe_img = Tensor(rng.normal(size=(2, 2, 2, 4)))
    cases.append(("patch_embed", s, lambda p=p: (nn.patch_embed(img, 2, p) * probe_img).sum()))
    vid = rng.uniform(size=(2, 4, 2, 2, 3))
    s, p = store_for(nn.init_patch_embed, 24, (2, 1, 1), 4)
    probe_vid = Tensor(rng.normal(size=(2, 2, 1, 1, 4)))
    cases.append(("frame_embed", s, lambda p=p: (nn.frame_embed(vid, 2, 2, p) * probe_vid).sum()))
    cond = Tensor(rng.normal(size=(2, 4)))
    s, p = store_for(tk.init_map_mlp, 4, 6, 3)
    probe_tok = Tensor(rng.normal(size=(2, 3, 4)))
    cases.append(("maps+tokenize", s, lambda p=p: (tk.tokenize(kv, tk.spatial_attention_maps(kv, cond, 3, p)) * probe_tok).sum()))
    cases.append(("maps+diversity", s, lambda p=p: dv.diversity_loss(tk.spatial_attention_maps(kv, cond, 3, p))))
    s, p = store_for(tk.init_fusion, 4)
    probe8 = Tensor(rng.normal(size=(2, 8, 4)))
    cases.append(("fuse_streams", s, lambda p=p: (tk.fuse_streams([x, kv], p) * probe8).sum()))
    return cases


def test_gradient_suite():
    t0 = time.perf_counter()
    errs = {name: grad_check(store, f, tol=1e-5) for name, store, f in _block_cases()}
    for mode in ("image", "video"):
        errs[f"micro model ({mode})"] = check_model_gradients(micro_config(mode)).max_rel_err
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    report("gradient suite", errs[worst] <= 1e-5 and elapsed < 120, f"{len(errs)} checks, worst {worst} {errs[worst]:.1e}; {elapsed:.1f}s")


def test_diversity_hand_cases():
    disjoint = dv.diversity_loss(np.array([[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]])).item()
    dup = dv.diversity_loss(np.array([[[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]]])).item()
    report("diversity hand cases", disjoint == 0.0 and dup == 0.5, f"disjoint {disjoint}, duplicated {dup}")


def test_orthogonality_descent():
    t0 = time.perf_counter()
    store = ParameterStore()
    store.add("logits", (1, 8, 16), "glorot", SplitMix64(7))
    state = TrainingState.fresh(store)
    for _ in range(500):
        store.zero_grad()
        dv.diversity_loss(nn.softmax(store["logits"])).backward()
        adam_step(state, {"logits": store["logits"].grad}, lr=0.1, weight_decay=0.0)
    o = dv.max_off_diagonal(dv.pairwise_overlap_matrix(nn.softmax(Tensor(store["logits"].data)).data))
    elapsed = time.perf_counter() - t0
    report("orthogonality descent", o < 1e-3 and elapsed < 30, f"max off-diagonal overlap {o:.2e} after 500 Adam steps; {elapsed:.1f}s")


@pytest.mark.slow
def test_learning_check():
    t0 = time.perf_counter()
    train_set = make_split("image", "train", 2000)
    val_set = make_split("image", "val", 200)
    test_set = make_split("image", "test", 200)
    results = {}
    for lam in (0.0, 0.1):
        cfg = RunConfig(ModelConfig(lam=lam), TrainConfig(steps=3000))
        state, _ = train(cfg, train_set, val_set)
        results[lam] = evaluate(cfg, state.params, test_set)
    base, div = results[0.0], results[0.1]
    ratio = div.mean_overlap / base.mean_overlap
    ok = base.em >= 0.90 and div.em >= base.em - 0.03 and ratio <= 0.5
    detail = (
        f"test EM lambda=0 {base.em:.3f}, lambda=0.1 {div.em:.3f}; mean overlap {base.mean_overlap:.2e} -> "
        f"{div.mean_overlap:.2e} (ratio {ratio:.2f}); {time.perf_counter() - t0:.0f}s"
    )
    report("image learning check", ok, detail)


def shuffle_frames(examples, seed=99):
    rng = SplitMix64(seed)
    out = []
    for e in examples:
        perm = list(range(e.visual.shape[0]))
        while perm == sorted(perm):
            perm = rng.shuffle(perm)
        out.append(Example(e.visual[perm], e.question, e.answer))
    return out


@pytest.mark.slow
def test_video_path():
    t0 = time.perf_counter()
    cfg = RunConfig(ModelConfig(mode="video"), TrainConfig(steps=9000, eval_every=3000))
    state, _ = train(cfg, make_split("video", "train", 2000), make_split("video", "val", 200))
    direction = [e for e in make_split("video", "test", 400) if e.kind == "direction"]
    em = evaluate(cfg, state.params, direction).em
    shuffled = evaluate(cfg, state.params, shuffle_frames(direction)).em
    ok = em >= 0.85 and em - shuffled >= 0.2
    report(
        "video path",
        ok,
        f"direction EM {em:.3f} on {len(direction)} questions, frame-shuffled {shuffled:.3f} (drop {em - shuffled:.3f}); {time.perf_counter() - t0:.0f}s",
    )


def test_determinism_and_persistence():
    tr, va = make_split("image", "train", 24), make_split("image", "val", 12)
    cfg = RunConfig(ModelConfig(width=32, heads=2, ff_hidden=32, map_hidden=32), TrainConfig(steps=30, eval_every=10))
    state_a, log_a = train(cfg, tr, va)
    _, log_b = train(cfg, tr, va)
    same_logs = log_a == log_b
    restored = decode_checkpoint(encode_checkpoint(state_a.params), np.float32)
    before, after = evaluate(cfg, state_a.params, va), evaluate(cfg, restored, va)
    same_eval = before.row(0) == after.row(0) and before.predictions == after.predictions
    goldens = all(hashlib.sha256((TESTDATA / n).read_bytes()).hexdigest() == h for n, h in GOLDEN_SHA256.items())
    regenerated = (
        encode_dataset([gen_image_example(42)], "image") == (TESTDATA / "image_seed42.dtds").read_bytes()
        and encode_dataset([gen_video_example(7)], "video") == (TESTDATA / "video_seed7.dtds").read_bytes()
    )
    round_trip = decode_dataset(encode_dataset(tr))[1] == tr
    ok = same_logs and same_eval and goldens and regenerated and round_trip
    report(
        "determinism and persistence",
        ok,
        f"identical logs {same_logs}, checkpoint eval identical {same_eval}, golden hashes {goldens}, regenerated goldens {regenerated}",
    )


def test_memorization():
    exs = make_split("image", "train", 4)
    cfg = RunConfig(ModelConfig(), TrainConfig(steps=1000, eval_every=50, batch_size=4))
    hit = []

    def on_eval(step, r):
        if r.em == 1.0 and r.f1 == 1.0 and not hit:
            hit.append(step)

    state, _ = train(cfg, exs, exs, on_eval=on_eval)
    final = evaluate(cfg, state.params, exs)
    ok = bool(hit) and final.em == 1.0 and final.f1 == 1.0
    report("memorization", ok, f"EM=F1=1 first reached at step {hit[0] if hit else 'never'}; final EM {final.em}, F1 {final.f1}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-q", "-s"]))
