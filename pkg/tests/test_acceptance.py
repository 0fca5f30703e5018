"""End-to-end acceptance checks, one test per criterion.

The trend, sweep and one-shot checks drive the ``tap`` CLI with its default
configuration (2-way 5-shot, T = 8, r = 16, lr = 1e-3, 4 folds, 50 episodes x
3 runs).  That part takes roughly 40 minutes on one CPU core.  Set
``TAKEAPEEK_ACCEPTANCE_DIR`` to keep the generated workspace and reuse it on a
later run.

A summary line per criterion is printed at the end of the pytest run.
"""

import csv
import json
import math
import os
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from takeapeek import autograd as ag
from takeapeek import cli
from takeapeek.autograd import Tensor
from takeapeek.engine import AdaptConfig, adapt, evaluate, predict_query, pseudo_query_loss
from takeapeek.episodes import FoldSplit, sample_episode
from takeapeek.losses import FocalConfig, class_weights, focal_loss
from takeapeek.lora import LoraAdapter, adapted_forward, attach, count_trainable, merge
from takeapeek.refnet import ModelConfig, build_model

BASELINES = Path(__file__).parent / "baselines" / "trend.json"
POLICY = {"conv": "pointwise_convs", "attention": "attention_projections"}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# criterion 1
# ----------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient oracle: adapters r=4 on the conv model, 100 parameters, step 1e-5")
def test_gradient_oracle(record_property):
    start = time.perf_counter()
    model = build_model(ModelConfig(variant="conv"))
    adapters = attach(model, "pointwise_convs", 4, seed=0)
    rng = np.random.default_rng(0)
    # move B off zero so every adapter entry has a non-trivial gradient
    for a in adapters:
        a.B.data[:] = rng.normal(0.0, 0.1, size=a.B.shape)
    episode = sample_episode(FoldSplit.for_fold(0), 2, 2, seed=3)
    params = adapters.parameters()
    ag.backward(pseudo_query_loss(model, episode, 0))

    # central differences are only meaningful when the stencil does not
    # straddle a ReLU kink, so the activation pattern is recorded per evaluation
    relu, patterns = ag.relu, []

    def recording_relu(x):
        patterns.append(x.data > 0)
        return relu(x)

    def value():
        patterns.clear()
        with ag.no_grad():
            out = pseudo_query_loss(model, episode, 0).item()
        return out, [p.copy() for p in patterns]

    errors, straddled, h = [], 0, 1e-5
    ag.relu = recording_relu
    try:
        while len(errors) < 100:
            _, p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            f_plus, pat_plus = value()
            p.data[idx] = old - h
            f_minus, pat_minus = value()
            p.data[idx] = old
            if any(np.any(a != b) for a, b in zip(pat_plus, pat_minus)):
                straddled += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = p.grad[idx]
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    finally:
        ag.relu = relu
    elapsed = time.perf_counter() - start
    record_property("note", f"max rel err {max(errors):.2e}, {straddled} kink stencils redrawn, {elapsed:.1f}s")
    assert max(errors) < 1e-4
    assert elapsed < 60


# ----------------------------------------------------------------------------
# criterion 2
# ----------------------------------------------------------------------------

@pytest.mark.criterion(2, "zero-init identity: both variants, ranks 2/8/32, bit-identical predictions")
@pytest.mark.parametrize("variant", ["conv", "attention"])
def test_zero_init_identity(variant):
    model = build_model(ModelConfig(variant=variant, seed=5))
    episodes = [sample_episode(FoldSplit.for_fold(f), 2, 2, seed=40 + f) for f in range(4)]
    reference = [predict_query(model, ep) for ep in episodes]
    for rank in (2, 8, 32):
        adapted = model.clone()
        attach(adapted, POLICY[variant], rank, alpha=1.0, seed=rank)
        for ep, (pred, logits) in zip(episodes, reference):
            p2, l2 = predict_query(adapted, ep)
            assert p2.tobytes() == pred.tobytes()
            assert l2.data.tobytes() == logits.data.tobytes()
        # the same holds through the engine with no iterations
        for ep, (pred, _) in zip(episodes, reference):
            tapped, _ = adapt(model, ep, AdaptConfig(method="tap", rank=rank, iterations=0))
            assert predict_query(tapped, ep)[0].tobytes() == pred.tobytes()


# ----------------------------------------------------------------------------
# criterion 3
# ----------------------------------------------------------------------------

@pytest.mark.criterion(3, "merge equivalence over 100 random draws within 1e-10")
def test_merge_equivalence(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        m, n = (int(v) for v in rng.integers(1, 48, size=2))
        r = int(rng.integers(1, min(m, n) + 1))
        alpha = float(rng.uniform(-4, 4))
        W = Tensor(rng.normal(size=(m, n)))
        adapter = LoraAdapter(Tensor(rng.normal(size=(m, r))), Tensor(rng.normal(size=(r, n))), alpha, r, "w")
        x = Tensor(rng.normal(size=(int(rng.integers(1, 16)), m)))
        diff = np.abs(adapted_forward(x, W, adapter).data - x.data @ merge(W, adapter).data).max()
        worst = max(worst, float(diff))
    record_property("note", f"max abs diff {worst:.2e}")
    assert worst < 1e-10


# ----------------------------------------------------------------------------
# criterion 4
# ----------------------------------------------------------------------------

@pytest.mark.criterion(4, "parameter-count law: exact doubling and closed form for r = 2..32")
@pytest.mark.parametrize("variant", ["conv", "attention"])
def test_parameter_count_law(variant):
    model = build_model(ModelConfig(variant=variant))
    kind = "pointwise" if variant == "conv" else "attention"
    shapes = [model.params[f"{layer}.weight"].shape for layer in model.layers_of_kind(kind)]
    counts = []
    for r in (2, 4, 8, 16, 32):
        got = count_trainable(attach(model.clone(), POLICY[variant], r))
        assert got == sum(r * (m + n) for m, n in shapes)
        counts.append(got)
    assert all(b == 2 * a for a, b in zip(counts, counts[1:]))


# ----------------------------------------------------------------------------
# criterion 5
# ----------------------------------------------------------------------------

@pytest.mark.criterion(5, "focal-loss oracles: cross-entropy reduction and hand values")
def test_focal_oracles(record_property):
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=3, size=(4, 25, 40))  # 1000 pixels
    mask = rng.integers(0, 4, size=(25, 40)).astype(float)
    got = focal_loss(Tensor(logits), mask, FocalConfig(0.0, "uniform")).item()
    shifted = logits - logits.max(axis=0)
    lse = np.log(np.exp(shifted).sum(axis=0)) + logits.max(axis=0)
    picked = np.take_along_axis(logits, mask.astype(int)[None], axis=0)[0]
    ce = float(np.mean(lse - picked))
    assert abs(got - ce) < 1e-9

    w_full = class_weights(np.zeros((3, 3)), 2)
    assert abs(w_full[0] - 1 / math.log(2.1)) < 1e-6
    assert abs(w_full[1] - 1 / math.log(1.1)) < 1e-6
    single = focal_loss(Tensor(np.array([math.log(9.0), 0.0]).reshape(2, 1, 1)), np.zeros((1, 1)),
                        FocalConfig(2.0, "uniform")).item()
    assert abs(single - 1.0536e-3) < 1e-6
    record_property("note", f"w(full)={w_full[0]:.5f} w(absent)={w_full[1]:.5f} single={single:.4e}")


# ----------------------------------------------------------------------------
# criterion 6
# ----------------------------------------------------------------------------

@pytest.mark.criterion(6, "protocol laws: pass count, frozen-set checksums, order-independent reset")
def test_protocol_laws():
    model = build_model(ModelConfig(variant="conv", seed=3))
    split = FoldSplit.for_fold(1)
    ep = sample_episode(split, 2, 5, seed=99)
    enc = [k for k in model.params if k.startswith("encoder.")]
    dec = [k for k in model.params if k.startswith("decoder.")]

    def sums(m, names):
        return ag.parameters_checksum([(k, m.params[k]) for k in names])

    frozen_before = {k: v.tobytes() for k, v in model.frozen.items()}
    tapped, trace = adapt(model, ep, AdaptConfig(method="tap", iterations=8, rank=16))
    assert trace.passes == 8 * 2 * 5
    assert sums(tapped, dec) == sums(model, dec)
    assert sums(tapped, enc) == sums(model, enc)
    assert {k: v.tobytes() for k, v in tapped.frozen.items()} == frozen_before

    tuned, trace = adapt(model, ep, AdaptConfig(method="decoder_ft", iterations=2))
    assert trace.passes == 2 * 2 * 5
    assert sums(tuned, enc) == sums(model, enc)
    assert sums(tuned, dec) != sums(model, dec)

    episodes = [sample_episode(split, 2, 2, seed=500 + i) for i in range(50)]
    cfg = AdaptConfig(method="tap", iterations=1, rank=4, learning_rate=1e-2)
    forward = {r.episode_id: (r.miou, r.trace.losses) for r in evaluate(model, episodes, cfg)}
    shuffled = episodes[:]
    random.Random(7).shuffle(shuffled)
    again = {r.episode_id: (r.miou, r.trace.losses) for r in evaluate(model, shuffled, cfg)}
    assert forward == again


# ----------------------------------------------------------------------------
# criteria 7-9: the CLI on the synthetic benchmark
# ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    keep = os.environ.get("TAKEAPEEK_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("bench")
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "default.conf"
    conf.write_text("# every key at its default\n")
    timings = {}
    steps = [("gen-data", root / "data" / "classes.json"),
             ("meta-train", root / "checkpoints" / "fold3" / "loss.csv")]
    for command, marker in steps:
        if not marker.exists():
            t0 = time.perf_counter()
            assert cli.main([command, "--config", str(conf), "--force"]) == 0
            timings[command] = time.perf_counter() - t0
    return root, conf, timings


def _run(root, conf, command, out):
    target = root / out
    if not (target / "config.resolved").exists():
        t0 = time.perf_counter()
        assert cli.main([command, "--config", str(conf), "--out", str(target), "--force"]) == 0
        return target, time.perf_counter() - t0
    return target, None


@pytest.mark.criterion(7, "trend: TaP beats vanilla on >= 3 of 4 folds and matches or beats Decoder-FT")
def test_trend_reproduction(bench, record_property):
    root, conf, _ = bench
    out, seconds = _run(root, conf, "eval", "eval")
    rows = json.loads((out / "report.json").read_text())["rows"]
    cells = {(r["method"], r["fold"]): r for r in rows}
    folds = sorted({r["fold"] for r in rows})
    assert folds == [0, 1, 2, 3]
    tap = [cells[("tap", f)]["delta"] for f in folds]
    dft = [cells[("decoder_ft", f)]["delta"] for f in folds]
    summary = {str(f): {m: cells[(m, f)]["miou"] for m in ("vanilla", "decoder_ft", "tap")} for f in folds}
    timing = f", {seconds / 60:.1f} min" if seconds else ""
    record_property("note", "tap deltas " + " ".join(f"{100 * d:+.2f}" for d in tap)
                    + f"; mean tap {100 * np.mean(tap):+.2f} vs decoder-ft {100 * np.mean(dft):+.2f}{timing}")
    assert sum(d > 0 for d in tap) >= 3
    assert np.mean(tap) >= np.mean(dft)
    if BASELINES.exists():
        baseline = json.loads(BASELINES.read_text())
        for f, values in baseline["miou"].items():
            for method, value in values.items():
                assert summary[f][method] == pytest.approx(value, abs=1e-9), (f, method)


@pytest.mark.criterion(8, "sweep: ranks 2^1..2^6 x t=0..8 completes, t=0 constant, pinned schema")
def test_sweep_sanity(bench, record_property):
    root, conf, _ = bench
    out, _ = _run(root, conf, "sweep", "sweep")
    with open(out / "sweep.csv") as fh:
        assert fh.readline().strip() == "fold,rank,t,miou,status"
    rows = read_csv(out / "sweep.csv")
    ranks = [2, 4, 8, 16, 32, 64]
    assert len(rows) == len(ranks) * 9
    assert sorted({int(r["rank"]) for r in rows}) == ranks
    assert {int(r["t"]) for r in rows} == set(range(9))
    ok = [r for r in rows if r["status"] == "ok"]
    t0 = {float(r["miou"]) for r in ok if r["t"] == "0"}
    assert len(t0) == 1
    skipped = sorted({int(r["rank"]) for r in rows if r["status"] != "ok"})
    # ranks above the 32-wide layers cannot be attached and are reported, not run
    assert skipped == [64]
    params = [p for p in read_csv(out / "params.csv") if p["status"] == "ok"]
    counts = [int(p["trainable_params"]) for p in params]
    assert all(b == 2 * a for a, b in zip(counts, counts[1:]))
    assert (out / "sweep.svg").stat().st_size > 0
    best = max(ok, key=lambda r: float(r["miou"]))
    record_property("note", f"t=0 mIoU {100 * t0.pop():.2f}; best r={best['rank']} t={best['t']} "
                            f"{100 * float(best['miou']):.2f}; skipped {skipped}")


@pytest.mark.criterion(9, "one-shot study: K=1 and K=2 curves emitted, K=1 at t=0 equals vanilla")
def test_oneshot_study(bench, record_property):
    root, conf, _ = bench
    out, _ = _run(root, conf, "oneshot-study", "oneshot")
    rows = read_csv(out / "oneshot.csv")
    for k in ("1", "2"):
        series = [r for r in rows if r["shots"] == k]
        assert {int(r["t"]) for r in series} == set(range(9))
        for r in series:
            if r["t"] == "0":
                assert float(r["miou"]) == float(r["vanilla_miou"])
    curves = {}
    for k in ("1", "2"):
        curves[k] = [np.mean([float(r["miou"]) for r in rows if r["shots"] == k and int(r["t"]) == t])
                     for t in (0, 8)]
    record_property("note", "; ".join(f"K={k}: {100 * a:.1f} -> {100 * b:.1f}" for k, (a, b) in curves.items()))


# ----------------------------------------------------------------------------
# meta-training regression baselines
# ----------------------------------------------------------------------------

def test_meta_train_halves_windowed_loss(bench):
    root, _, _ = bench
    for fold in range(4):
        losses = [float(r["loss"]) for r in read_csv(root / "checkpoints" / f"fold{fold}" / "loss.csv")]
        assert len(losses) == 2000
        assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


def test_meta_train_running_median_is_non_increasing(bench):
    root, _, _ = bench
    rows = read_csv(root / "checkpoints" / "fold0" / "loss.csv")
    med = np.array([float(r["running_median"]) for r in rows])[99:]
    assert np.all(np.diff(med) <= 0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
