"""One test per acceptance criterion; the summary hook in conftest prints a PASS/FAIL line for each."""

import csv
import io
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from attncurriculum.cli import main
from attncurriculum.corpus import ALPACA_TEMPLATE, Tokenizer, encode_dataset, load_dataset
from attncurriculum.curriculum import OrderingPolicy, build_plan
from attncurriculum.difficulty import DifficultyRecord, ScoreCache, ScoringOptions, score_attention, score_dataset
from attncurriculum.evalreport import ResultsGrid, render_grid
from attncurriculum.model import (
    ForwardResult,
    ModelConfig,
    answer_loss,
    backward,
    forward,
    init_model,
    load_checkpoint,
    masked_loss,
)
from attncurriculum.rng import SplitMix64, fisher_yates
from oracles import (
    brute_force_attention_variance,
    central_differences,
    manual_answer_nll,
    random_capture,
    reference_stable_order,
)

FIXTURES = Path(__file__).parent / "fixtures"
FD_FLOOR = 1e-5


def test_criterion_1_gradient_oracle():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=32, max_seq=16, vocab_size=32, precision="double")
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for seed, T, answer_start in ((0, 16, 9), (1, 12, 4)):
        model = init_model(cfg, seed)
        tokens = rng.integers(0, 32, size=T).tolist()
        analytic = backward(model, tokens, answer_start)
        names, params = zip(*model.named_parameters())
        t = torch.tensor(tokens)
        numeric = central_differences(lambda: answer_loss(model, t, answer_start), params, h=1e-4)
        for name, num in zip(names, numeric):
            a = analytic[name]
            denom = torch.clamp(torch.maximum(a.abs(), num.abs()), min=FD_FLOOR)
            worst = max(worst, float(((a - num).abs() / denom).max()))
    elapsed = time.perf_counter() - t0
    print(f"max relative error {worst:.3e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60


def test_criterion_2_attention_variance_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(60):
        L, H, T = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 33))
        capture = random_capture(rng, L, H, T, scale=float(rng.uniform(0.1, 6.0)))
        a = int(rng.integers(1, T))
        worst = max(worst, abs(score_attention(capture, a) - brute_force_attention_variance(capture, a)))
    # the model's own captures at full size
    cfg = ModelConfig(n_layers=4, n_heads=4, d_model=16, d_ff=32, max_seq=32, vocab_size=40, precision="double")
    model = init_model(cfg, 2)
    for trial in range(10):
        tokens = rng.integers(0, 40, size=32).tolist()
        a = int(rng.integers(1, 32))
        cap = forward(model, tokens, capture_attention=True).capture
        worst = max(worst, abs(score_attention(cap, a) - brute_force_attention_variance(cap, a)))
    print(f"max abs error {worst:.3e}")
    assert worst <= 1e-10


def test_criterion_3_masked_loss_oracle():
    rng = np.random.default_rng(2)
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq=32, vocab_size=50, precision="double")
    worst = 0.0
    for trial in range(60):
        model = init_model(cfg, trial)
        T = int(rng.integers(2, 33))
        tokens = rng.integers(0, 50, size=T).tolist()
        a = int(rng.integers(1, T))
        res = forward(model, tokens)
        got = masked_loss(res, a)
        want = manual_answer_nll(res.logits.numpy(), tokens, a)
        worst = max(worst, abs(got - want))
    print(f"max abs error vs manual sum {worst:.3e}")
    assert worst <= 1e-8
    worst_uniform = 0.0
    for V, T, a in ((50, 20, 5), (7, 3, 1), (1024, 32, 31)):
        tokens = rng.integers(0, V, size=T).tolist()
        res = ForwardResult(torch.zeros(T, V, dtype=torch.float64),
                            torch.log_softmax(torch.zeros(T - 1, V, dtype=torch.float64), -1)[:, 0].neg())
        worst_uniform = max(worst_uniform, abs(masked_loss(res, a) - (T - a) * math.log(V)))
        cfg_u = ModelConfig(n_layers=1, n_heads=1, d_model=8, d_ff=8, max_seq=T, vocab_size=V, precision="double")
        m = init_model(cfg_u, 0)
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
        worst_uniform = max(worst_uniform, abs(masked_loss(forward(m, tokens), a) - (T - a) * math.log(V)))
    print(f"max abs error vs uniform closed form {worst_uniform:.3e}")
    assert worst_uniform <= 1e-10


def _cache(length, attention, loss):
    rows = [DifficultyRecord(i, length[i], attention[i], loss[i]) for i in range(len(length))]
    header = {"format": "attncurriculum-score-cache", "version": 1, "model_fingerprint": None,
              "options": {"metrics": ["length", "attention", "loss"]}}
    return ScoreCache(header, rows)


def test_criterion_4_plan_properties():
    rng = np.random.default_rng(3)
    kinds = ["random", "length", "attention", "loss"]
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        levels = int(rng.integers(1, 8))  # few levels forces ties
        length = rng.integers(1, levels + 1, size=n).tolist()
        att = (rng.integers(0, levels, size=n) / levels).tolist()
        loss = (rng.integers(0, levels, size=n) * 0.37).tolist()
        cache = _cache(length, att, loss)
        kind = kinds[trial % 4]
        direction = "easy_to_hard" if (trial // 4) % 2 == 0 else "hard_to_easy"
        policy = OrderingPolicy(kind, direction)
        seed = int(rng.integers(0, 2**63))
        n_epochs = int(rng.integers(1, 5))
        plan = build_plan(cache, policy, n_epochs, seed)
        for order in plan.epochs:
            assert sorted(order) == list(range(n))
        assert list(plan.epochs[0]) == fisher_yates(n, SplitMix64(seed))
        if kind != "random" and n_epochs > 1:
            sign = 1 if direction == "easy_to_hard" else -1
            raw = {"length": length, "loss": loss, "attention": [-x for x in att]}[kind]
            expected = reference_stable_order(range(n), [sign * k for k in raw])
            assert all(list(e) == expected for e in plan.epochs[1:])
            moved = _cache([3 * x + 1 for x in length], [math.exp(x) for x in att], [x ** 3 + 2 for x in loss])
            assert build_plan(moved, policy, n_epochs, seed).epochs == plan.epochs
        assert build_plan(cache, policy, n_epochs, seed).to_text() == plan.to_text()


def test_criterion_5_softmax_rows():
    rng = np.random.default_rng(4)
    worst = 0.0
    for precision in ("single", "double"):
        for trial in range(10):
            cfg = ModelConfig(n_layers=int(rng.integers(1, 4)), n_heads=4, d_model=16, d_ff=32, max_seq=32,
                              vocab_size=64, precision=precision)
            model = init_model(cfg, trial)
            with torch.no_grad():
                for p in model.parameters():
                    p.mul_(float(rng.uniform(0.5, 4.0)))  # sharpen and flatten the distributions
            tokens = rng.integers(0, 64, size=int(rng.integers(1, 33))).tolist()
            for layer in forward(model, tokens, capture_attention=True).capture:
                T = layer.shape[-1]
                upper = np.triu(np.ones((T, T), dtype=bool), k=1)
                assert np.all(layer[:, upper] == 0.0)
                sums = np.where(upper, 0.0, layer).sum(-1, dtype=np.float64)
                worst = max(worst, float(np.abs(sums - 1).max()))
    print(f"max row-sum deviation {worst:.3e}")
    assert worst <= 1e-5


def test_criterion_6_end_to_end_smoke(tmp_path, capsys):
    out = tmp_path / "grid.csv"
    jobs = str(os.cpu_count() or 1)
    t0 = time.perf_counter()
    rc = main(["compare", "--policies", "random,attention,loss,length", "--epochs-list", "1,2,3",
               "--format", "csv", "--out", str(out), "--jobs", jobs, "--seed", "0"])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    losses = manifest["epoch_mean_losses"]
    print(f"compare finished in {elapsed:.1f}s on {jobs} cores")
    for policy, per_epoch in sorted(losses.items()):
        print(f"  {policy}: " + ", ".join(f"{x:.4f}" for x in per_epoch))
    assert elapsed < 600
    assert set(losses) == {"random", "attention", "loss", "length"}
    assert all(len(v) == 3 and v[2] < v[0] for v in losses.values())
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    cells = [(r["epochs"], r["method"]) for r in rows]
    assert cells == [("1", "random")] + [(e, m) for e in ("2", "3") for m in ("random", "attention", "loss", "length")] \
        + [("", "Base Model")]
    for r in rows:
        vals = [float(r[c]) for c in ("copy", "modadd")]
        assert all(0.0 <= v <= 100.0 for v in vals)
        assert abs(float(r["average"]) - sum(vals) / 2) <= 0.005 + 1e-9
        assert float(r["perplexity"]) > 1.0
    assert sum(int(r["best"]) for r in rows) >= 1


@pytest.mark.parametrize("name,best", [("table3_mistral7b_orca_math", 66.28),
                                       ("table7_gemma7b_slimorca_dedup", 66.87)])
def test_criterion_7_fixture_tables(name, best):
    grid = ResultsGrid.from_fixture(FIXTURES / f"{name}.json")
    grid.check_averages()
    assert max(r.average for r in grid.rows) == best
    md = render_grid(grid, "markdown")
    assert f"**{best:.2f}**" in md
    assert md == (FIXTURES / f"{name}.golden.md").read_text()
    assert render_grid(grid, "csv") == (FIXTURES / f"{name}.golden.csv").read_text()


def test_criterion_8_reproducibility(tmp_path):
    assert main(["gen-data", "--out-dir", str(tmp_path / "data")]) == 0
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--data", str(tmp_path / "data" / "train.jsonl"), "--out-dir", str(out),
                     "--policy", "attention", "--seed", "7"]) == 0
        digests.append([json.loads(l).get("checkpoint_sha256") for l in (out / "runlog.jsonl").read_text().splitlines()
                        if json.loads(l)["type"] == "epoch"])
        for e in (1, 2, 3):
            assert (out / f"epoch{e}.ckpt").exists()
    assert digests[0] == digests[1] and len(digests[0]) == 3
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("epoch1.ckpt", "epoch2.ckpt", "epoch3.ckpt", "init.ckpt", "scores.jsonl", "plan.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # tokenizer and score cache round-trip exactly
    tok_text = (a / "tokenizer.txt").read_text()
    tok = Tokenizer.load(a / "tokenizer.txt")
    assert tok.to_text() == tok_text
    tok.save(tmp_path / "tok2.txt")
    assert (tmp_path / "tok2.txt").read_bytes() == (a / "tokenizer.txt").read_bytes()
    records = load_dataset(tmp_path / "data" / "train.jsonl")
    examples = encode_dataset(records[:64], ALPACA_TEMPLATE, tok, 128)
    full = score_dataset(examples, load_checkpoint(a / "init.ckpt"), ScoringOptions())
    full.save(tmp_path / "full.jsonl")
    again = ScoreCache.load(tmp_path / "full.jsonl")
    assert again.to_text() == full.to_text()
    assert [(r.attention_score, r.loss_score) for r in again.rows] == [(r.attention_score, r.loss_score)
                                                                        for r in full.rows]
    cache_text = (a / "scores.jsonl").read_text()
    assert ScoreCache.from_text(cache_text).to_text() == cache_text
