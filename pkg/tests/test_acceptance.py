"""Acceptance criteria 1-10, each with independent oracles and pinned tolerances."""

import hashlib
import itertools
import struct
import time
from collections import Counter

import numpy as np
import pytest

from deskqlora import numerics as nx
from deskqlora.harness.data import pattern_task
from deskqlora.harness.metrics import accuracy, map_to_class, weighted_f1
from deskqlora.harness.runner import RunConfig, finetune, run_eval
from deskqlora.lora import save_adapters
from deskqlora.model import ArchConfig, build_model, example_loss, forward, get_arch
from deskqlora.numerics import Rng, Tensor
from deskqlora.optim import AdamState, ZeroOneAdamState, adam_step, compress_1bit, to_grid, zero_one_adam_step
from deskqlora.parallel import Example, ddp_step, make_group, makespan, pipeline_forward, pipeline_schedule, plan_pipeline
from deskqlora.planner import GB, MIB, count_lora_params, plan
from deskqlora.quant import QuantConfig, dequantize, quantize

from conftest import FOUR_LAYER, SMALL, record


def bf16_ulp_oracle(x: float) -> float:
    """Spacing of BF16 values at |x|, from the FP32 bit pattern (8 exponent bits, 7 mantissa bits)."""
    (bits,) = struct.unpack("<I", struct.pack("<f", np.float32(abs(x))))
    exp = max((bits >> 23) & 0xFF, 1)
    return 2.0 ** (exp - 127 - 7)


# 1 -------------------------------------------------------------------------

def test_criterion_01_counting_identities():
    t0 = time.perf_counter()
    expected = {("llama3-8b", 8): 4_718_592, ("llama3-8b", 4): 2_359_296,
                ("llama3-70b", 8): 22_282_240, ("llama3-70b", 4): 11_141_120}
    got = {key: plan(key[0], key[1], 4).trainable_params for key in expected}
    # arithmetic oracle: layers * r * ((d+d) + 2*(d+d_kv))
    oracle = {(a, r): L * r * (2 * d + 2 * (d + 1024)) for (a, r), (L, d) in
              {("llama3-8b", 8): (32, 4096), ("llama3-8b", 4): (32, 4096),
               ("llama3-70b", 8): (80, 8192), ("llama3-70b", 4): (80, 8192)}.items()}
    elapsed = time.perf_counter() - t0
    ok = got == expected == oracle and elapsed < 1.0
    assert record(1, ok, f"counts {sorted(got.values())} in {elapsed * 1e3:.1f} ms")


# 2 -------------------------------------------------------------------------

def test_criterion_02_adapter_sizes(tmp_path):
    t0 = time.perf_counter()
    mib = {key: plan(*key, 4).adapter_bytes / MIB for key in [("llama3-8b", 8), ("llama3-8b", 4), ("llama3-70b", 4)]}
    preset_ok = (mib[("llama3-8b", 8)] == 9.0 and mib[("llama3-8b", 4)] == 4.5
                 and mib[("llama3-70b", 4)] == 21.25 and abs(mib[("llama3-70b", 4)] - 21.3) <= 0.1)
    # the byte formula matches what is actually written, on toy dims
    toy_ok = True
    for arch, r in [(get_arch("toy"), 4), (SMALL, 2), (FOUR_LAYER, 3)]:
        model = build_model(arch, QuantConfig(4, 64, "nf4"), r)
        written = save_adapters(model.adapters(), tmp_path / f"{arch.n_layers}-{r}.flra")
        toy_ok &= written == plan(arch, r, 4).adapter_bytes == 2 * count_lora_params(arch, r)
    elapsed = time.perf_counter() - t0
    ok = preset_ok and toy_ok and elapsed < 60
    assert record(2, ok, "MiB " + ", ".join(f"{a} r{r}={v}" for (a, r), v in mib.items()) + f"; toy payloads match")


# 3 -------------------------------------------------------------------------

def test_criterion_03_model_size_ratios():
    rows = [plan(a, r, 4) for a in ("llama3-8b", "llama3-70b") for r in (4, 8)]
    ratios_ok = all(abs(p.ratio(4) - 25.0) <= 0.2 and abs(p.ratio(8) - 50.0) <= 0.2 for p in rows)
    size_ok = plan("llama3-8b", 8, 16).model_bytes_by_bits[16] == 16_060_000_000
    ok = ratios_ok and size_ok
    assert record(3, ok, f"ratios 4-bit {rows[0].ratio(4):.1f}% 8-bit {rows[0].ratio(8):.1f}%, "
                         f"8B 16-bit {rows[0].model_bytes_by_bits[16] / GB:.2f} GB")


# 4 -------------------------------------------------------------------------

def _fd_config(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n_heads = int(rng.choice([1, 2]))
    d = int(rng.choice([4, 8]))
    arch = ArchConfig(n_layers=int(rng.integers(1, 3)), d_model=d, d_kv=d // n_heads * int(rng.integers(1, n_heads + 1)),
                      n_heads=n_heads, vocab_size=12, max_seq=6, d_ff=int(rng.choice([4, 8])))
    quant = [None, QuantConfig(8), QuantConfig(4, 16, "nf4")][seed % 3]
    r = int(rng.integers(1, 3))
    model = build_model(arch, quant, r, alpha=float(rng.uniform(1, 32)), dropout=float(rng.choice([0.0, 0.3])), seed=seed)
    params = {k: rng.normal(size=v.shape) * 0.5 for k, v in model.parameter_arrays().items()}
    prompt = [int(x) for x in rng.integers(0, 12, size=int(rng.integers(1, 3)))]
    answer = [int(x) for x in rng.integers(0, 12, size=int(rng.integers(1, 3)))]

    def loss_of(p):
        for a in model.adapters():
            a.A, a.B = p[f"{a.name}.A"], p[f"{a.name}.B"]
        return example_loss(model, prompt, answer, "train", Rng(seed).derive(7))

    analytic = nx.grad(loss_of, {k: Tensor(v) for k, v in params.items()})
    h = 1e-5
    num, ana = [], []
    for name, base in params.items():
        for idx in np.ndindex(base.shape):
            vals = []
            for delta in (h, -h):
                arr = base.copy()
                arr[idx] += delta
                trial = {k: Tensor(v) for k, v in params.items()}
                trial[name] = Tensor(arr)
                vals.append(loss_of(trial).item())
            num.append((vals[0] - vals[1]) / (2 * h))
            ana.append(analytic[name][idx])
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(ana - num) / np.linalg.norm(num))


def test_criterion_04_gradient_correctness():
    t0 = time.perf_counter()
    errs = [_fd_config(seed) for seed in range(100)]
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and elapsed < 120
    assert record(4, ok, f"max relative error {max(errs):.2e} over 100 configs in {elapsed:.1f} s")


# 5 -------------------------------------------------------------------------

def test_criterion_05_quantization_bounds():
    rng = np.random.default_rng(2024)
    worst = 0.0
    ok = True
    for bits in (4, 8):
        cfg = QuantConfig(bits, 64, "int_absmax")
        qmax = 2 ** (bits - 1) - 1
        for _ in range(1000):
            x = rng.normal(size=64) * 10.0 ** rng.uniform(-4, 4)
            q = quantize(Tensor(x), cfg)
            d = dequantize(q).data
            bound = np.array([float(q.scales[0]) / (2 * qmax) + bf16_ulp_oracle(v) for v in d])
            err = np.abs(d - x)
            ok &= bool(np.all(err <= bound))
            worst = max(worst, float(np.max(err / bound)))
            q2 = quantize(Tensor(d), cfg)
            ok &= q2.packed == q.packed and np.array_equal(q2.scales, q.scales)
            ok &= np.array_equal(dequantize(q2).data, d)
    nf = QuantConfig(4, 64, "nf4")
    for _ in range(200):
        d = dequantize(quantize(Tensor(rng.standard_t(4, size=64)), nf))
        ok &= np.array_equal(dequantize(quantize(d, nf)).data, d.data)
    assert record(5, ok, f"2000 int blocks within bound (worst err/bound {worst:.3f}); idempotence exact")


# 6 -------------------------------------------------------------------------

def _ddp_run(k: int, steps: int = 50, batch: int = 8):
    rng = np.random.default_rng(6)
    data = [Example(tuple(rng.integers(0, 32, size=4)), tuple(rng.integers(0, 32, size=2)), key=i)
            for i in range(steps * batch)]
    group = make_group(build_model(SMALL, QuantConfig(4, 64, "nf4"), 2, seed=6), k, lambda: AdamState(lr=1e-2), seed=6)
    for s in range(steps):
        ddp_step(group, data[s * batch:(s + 1) * batch])
        group.check_coherent()
    return group.replicas[0].model.parameter_arrays()


def test_criterion_06_ddp_equivalence():
    t0 = time.perf_counter()
    ref = _ddp_run(1)
    worst = 0.0
    for k in (2, 4):
        got = _ddp_run(k)
        worst = max(worst, max(np.linalg.norm(got[n] - ref[n]) / np.linalg.norm(ref[n]) for n in ref))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 300
    assert record(6, ok, f"k in {{2,4}} vs k=1 after 50 steps: max relative diff {worst:.1e} in {elapsed:.1f} s")


# 7 -------------------------------------------------------------------------

def test_criterion_07_pipeline():
    model = build_model(FOUR_LAYER, QuantConfig(4, 64, "nf4"), 2, seed=7)
    rng = np.random.default_rng(7)
    model.set_parameters({k: rng.normal(size=v.shape) * 0.1 for k, v in model.parameter_arrays().items()}, False)
    batch = [list(rng.integers(0, 32, size=int(n))) for n in rng.integers(1, 12, size=8)]
    ref = [forward(model, s).data for s in batch]
    equal = all(
        all(np.array_equal(a.data, b) for a, b in zip(pipeline_forward(model, plan_pipeline(4, k, m), batch), ref))
        for k in range(1, 5) for m in range(1, 9)
    )
    # exhaustive schedule check against a tick-by-tick simulation
    sched_ok = True
    for k, m in itertools.product(range(1, 9), range(1, 17)):
        sched = pipeline_schedule(m, k)
        busy = Counter((t, s) for t, s, _ in sched)
        done = {(s, j): t for t, s, j in sched}
        sched_ok &= makespan(sched) == m + k - 1 and max(busy.values()) == 1
        sched_ok &= all(done[(s - 1, j)] < t for (s, j), t in done.items() if s > 0)
    ok = equal and sched_ok
    assert record(7, ok, "bitwise equal for k 1..4 x m 1..8; makespan m+k-1 for k 1..8 x m 1..16")


# 8 -------------------------------------------------------------------------

def _digest(d):
    h = hashlib.sha256()
    for k in sorted(d):
        h.update(np.ascontiguousarray(d[k]).tobytes())
    return h.hexdigest()


def test_criterion_08_zero_one_adam():
    rng = np.random.default_rng(8)
    shapes = {"w": (5, 7), "b": (3,)}
    grads = [{n: rng.normal(size=s) for n, s in shapes.items()} for _ in range(60)]
    p0 = {n: rng.normal(size=s) for n, s in shapes.items()}

    pa, pz = dict(p0), dict(p0)
    sa, sz = AdamState(lr=1e-3), ZeroOneAdamState(lr=1e-3)
    for g in grads:
        pa, pz = adam_step(sa, pa, g), zero_one_adam_step(sz, pz, g)
    warm_ok = all(np.array_equal(pa[n], pz[n]) for n in pa)

    residual = np.zeros(40)
    total_in = np.zeros(40)
    total_out = np.zeros(40)
    for _ in range(1000):
        u = to_grid(rng.normal(size=40) * rng.uniform(1e-3, 10))
        _, sent, residual = compress_1bit(u, residual)
        total_in += u
        total_out += sent
    conserve_ok = np.array_equal(total_out + residual, total_in)

    state = ZeroOneAdamState(lr=1e-3, freeze_step=10)
    p = dict(p0)
    frozen = None
    bits_ok = True
    for t, g in enumerate(grads, start=1):
        before = state.bits_transmitted
        p = zero_one_adam_step(state, p, g)
        if t == 10:
            frozen = _digest(state.v_frozen)
        elif t > 10:
            bits_ok &= state.bits_transmitted - before == sum(int(np.prod(s)) + 64 for s in shapes.values())
            bits_ok &= _digest(state.v_frozen) == frozen
    ok = warm_ok and conserve_ok and bits_ok and state.phase == "frozen"
    assert record(8, ok, f"warmup bitwise={warm_ok}, conservation over 1000 steps={conserve_ok}, "
                         f"frozen v hash constant and numel+64 bits/step={bits_ok}")


# 9 -------------------------------------------------------------------------

def test_criterion_09_learnability():
    t0 = time.perf_counter()
    gains = []
    controls = True
    for seed in range(10):
        cfg = RunConfig(lr=1e-2, epochs=6, seed=seed)
        train, test = pattern_task(500, seed), pattern_task(200, 1000 + seed)
        base_model = build_model(get_arch(cfg.arch), cfg.quant_config(), cfg.rank, cfg.alpha, cfg.dropout, seed)
        base = run_eval(base_model, test, cfg)
        tuned = run_eval(finetune(train, cfg).model, test, cfg)
        gains.append(tuned.accuracy - base.accuracy)
        zero = run_eval(finetune(train, RunConfig(lr=1e-2, epochs=0, seed=seed)).model, test, cfg)
        controls &= zero.predictions == base.predictions and zero.accuracy == base.accuracy
    elapsed = time.perf_counter() - t0
    wins = sum(g >= 0.30 for g in gains)
    ok = wins >= 9 and controls and elapsed < 600
    assert record(9, ok, f"gain >= 30 points in {wins}/10 seeds (min {min(gains) * 100:.1f}); "
                         f"epochs=0 equals base={controls}; {elapsed:.0f} s")


# 10 ------------------------------------------------------------------------

def _oracle_scores(preds, golds, classes):
    """Brute-force confusion matrix over classes plus a catch-all column."""
    cols = list(classes) + ["<none>"]
    mapped = []
    for p in preds:
        hit = [c for c in classes if c.lower() in " ".join(p.lower().split())]
        mapped.append(hit[0] if hit else "<none>")
    cm = {(g, m): 0 for g in classes for m in cols}
    for g, m in zip(golds, mapped):
        cm[(g, m)] += 1
    correct = sum(1 for p, g in zip(preds, golds) if g.lower() in " ".join(p.lower().split()))
    wf1 = 0.0
    for c in classes:
        tp = cm[(c, c)]
        fp = sum(cm[(g, c)] for g in classes if g != c)
        fn = sum(cm[(c, m)] for m in cols if m != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        wf1 += f1 * (tp + fn) / len(golds)
    return correct / len(golds), wf1


def test_criterion_10_metric_oracle():
    rng = np.random.default_rng(10)
    classes = ["alpha", "beta", "gamma", "delta"]
    vocab = classes + ["The answer is beta.", "GAMMA", "none of these", "x"]
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        golds = [classes[i] for i in rng.integers(0, 4, size=n)]
        preds = [vocab[i] for i in rng.integers(0, len(vocab), size=n)]
        acc_o, f1_o = _oracle_scores(preds, golds, classes)
        worst = max(worst, abs(acc_o - accuracy(preds, golds)), abs(f1_o - weighted_f1(preds, golds, classes)))
    hand_acc = accuracy(["A", "B", "B"], ["A", "A", "B"])
    hand_f1 = weighted_f1(["A", "B", "B"], ["A", "A", "B"], ["A", "B"])
    hand_ok = abs(hand_acc - 2 / 3) < 1e-15 and abs(hand_f1 - 2 / 3) < 1e-15
    ok = worst < 1e-12 and hand_ok
    assert record(10, ok, f"1000 random vectors max |diff| {worst:.1e}; hand example acc={hand_acc:.4f} f1={hand_f1:.4f}")
