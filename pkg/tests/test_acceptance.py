"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The training-based criteria (8, 9) dominate the
runtime; the whole module is sized to finish well inside its budgets on a
single core.
"""

import math
import statistics
import time

import numpy as np
import pytest

from bitfcn.bench import CPU_COST_MODEL, parameter_size, predicted_speedup, run_bench
from bitfcn.bitconv import (
    ConvGeom,
    bitconv2d,
    bitconv2d_with_sums,
    conv2d_reference,
    dequantize_conv,
    kernel_count,
    weight_code_sums,
    KERNEL_INVOCATIONS,
)
from bitfcn.bitpack import pack
from bitfcn.dataset import generate_toy_scene
from bitfcn.graph import backward, build_toy_bfcn, forward, stagewise_loss
from bitfcn.quantize import (
    FULL_PRECISION,
    QuantSpec,
    quantize_activations,
    quantize_unit,
    quantize_weights,
)
from bitfcn.trainer import (
    DecaySchedule,
    SplitData,
    TrainConfig,
    allocation_error,
    class_weights,
    decay_sequence,
    evaluate_miou,
    optimal_allocation,
    train_bfcn,
)

RNG = np.random.default_rng


def report(criterion, detail):
    print(f"\nACCEPTANCE {criterion}: PASS - {detail}")


# ---------------------------------------------------------------------------
# 1. bit-kernel exactness
# ---------------------------------------------------------------------------


def test_criterion_01_bit_kernel_exactness():
    t0 = time.perf_counter()
    rng = RNG(101)
    ks = (1, 2, 3, 4, 8)
    for trial in range(200):
        k_a, k_w = int(rng.choice(ks)), int(rng.choice(ks))
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 5))
        kh = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = kh // 2
        h = int(rng.integers(kh + 1, 9))
        w = int(rng.integers(kh + 1, 9))
        geom = ConvGeom(c, o, kh, kh, stride, pad)
        ca = rng.integers(0, 1 << k_a, size=(n, c, h, w))
        cw = rng.integers(0, 1 << k_w, size=(o, c, kh, kh))
        acc = bitconv2d(pack(ca, k_a), pack(cw, k_w), geom)
        oracle = np.rint(
            conv2d_reference(ca.astype(np.float64), cw.astype(np.float64), geom)
        ).astype(np.int64)
        assert np.array_equal(acc, oracle), (trial, k_a, k_w, geom)
    dt = time.perf_counter() - t0
    assert dt < 60.0
    report(1, f"200 random instances exactly match the integer oracle ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# 2. dequantized equivalence
# ---------------------------------------------------------------------------


def test_criterion_02_dequantized_equivalence():
    t0 = time.perf_counter()
    rng = RNG(202)
    ks = (1, 2, 3, 4, 8)
    worst = 0.0
    for trial in range(100):
        k_a, k_w = int(rng.choice(ks)), int(rng.choice(ks))
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 4))
        kh = int(rng.choice([1, 3]))
        geom = ConvGeom(c, o, kh, kh, int(rng.choice([1, 2])), kh // 2)
        a = rng.random((1, c, 7, 7))
        w = rng.uniform(-1.2, 1.2, (o, c, kh, kh))
        qa = quantize_activations(a, k_a)
        qw = quantize_weights(w, k_w)
        spec = QuantSpec(k_w, k_a)
        acts, weights = pack(qa.codes, k_a), pack(qw.codes, k_w)
        acc, sums = bitconv2d_with_sums(acts, weights, geom)
        got = dequantize_conv(acc, spec, sums, weight_code_sums(weights), geom.n_taps)
        want = conv2d_reference(qa.values, qw.values, geom, exact_sum=True)
        # 4 ulps at the accumulator's magnitude bound
        bound = geom.n_taps * max(np.abs(qw.values).max(), 1e-30) * max(
            np.abs(qa.values).max(), 1e-30
        )
        tol = 4 * np.spacing(bound)
        err = np.abs(got - want).max()
        worst = max(worst, err / max(tol, 1e-300))
        assert err <= tol, (trial, k_a, k_w, err, tol)
    dt = time.perf_counter() - t0
    assert dt < 60.0
    report(2, f"100 instances within 4 ulps of the fsum reference (worst {worst:.2f} of budget, {dt:.1f}s)")


# ---------------------------------------------------------------------------
# 3. allocation formulas
# ---------------------------------------------------------------------------


def test_criterion_03_allocation_formulas():
    t0 = time.perf_counter()
    assert allocation_error(2, 2) == 0.5
    assert allocation_error(1, 4) == 0.5625
    for c in (1, 4, 9, 16, 25, 36, 49, 64):
        k = int(math.isqrt(c))
        assert optimal_allocation(c) == (k, k)
    # balanced allocation minimizes E over every integer product <= 64
    for prod in range(1, 65):
        best = min(
            allocation_error(a, prod // a)
            for a in range(1, prod + 1)
            if prod % a == 0
        )
        root = math.isqrt(prod)
        if root * root == prod:
            assert allocation_error(root, root) == best
        pair = optimal_allocation(prod)
        assert pair[0] * pair[1] <= prod
        assert allocation_error(*pair) <= best + 1e-15
    dt = time.perf_counter() - t0
    assert dt < 1.0
    report(3, f"error model and balanced optimum verified exhaustively ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# 4. kernel-count complexity
# ---------------------------------------------------------------------------


def test_criterion_04_kernel_count_complexity():
    t0 = time.perf_counter()
    table = [((8, 8), 64), ((4, 4), 16), ((3, 3), 9), ((2, 2), 4),
             ((1, 4), 4), ((4, 1), 4), ((1, 2), 2)]
    rng = RNG(404)
    geom = ConvGeom(2, 3, 3, 3, 1, 1)
    counts = []
    for (k_w, k_a), expected in table:
        acts = pack(rng.integers(0, 1 << k_a, (1, 2, 8, 8)), k_a)
        weights = pack(rng.integers(0, 1 << k_w, (3, 2, 3, 3)), k_w)
        KERNEL_INVOCATIONS.reset()
        bitconv2d(acts, weights, geom)
        assert KERNEL_INVOCATIONS.count == expected == kernel_count(k_w, k_a)
        counts.append(KERNEL_INVOCATIONS.count)
    dt = time.perf_counter() - t0
    assert dt < 10.0
    assert counts == [64, 16, 9, 4, 4, 4, 2]
    report(4, f"instrumented kernel counts {counts} ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# 5. class weights
# ---------------------------------------------------------------------------


def test_criterion_05_class_weights():
    t0 = time.perf_counter()
    p = np.round(np.arange(0, 101) / 100, 2)
    w = class_weights(p, 1.4)
    assert (w >= 1.0).all() and (w <= 3.0).all()
    assert (np.diff(w) < 0).all()
    dt = time.perf_counter() - t0
    assert dt < 1.0
    report(5, f"weights in [{w.min():.4f}, {w.max():.4f}] inside [1,3], strictly decreasing ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# 6. decay schedule
# ---------------------------------------------------------------------------


def test_criterion_06_decay_schedule():
    t0 = time.perf_counter()
    expected = {1: [8, 7, 6, 5, 4, 3, 2], 2: [8, 6, 4, 2], 3: [8, 5, 2]}
    for r, seq in expected.items():
        got = decay_sequence(DecaySchedule(8, r, 2, 1))
        assert got == seq
        for t, k in enumerate(got[:-1]):
            assert k == 8 - r * t
    dt = time.perf_counter() - t0
    assert dt < 1.0
    report(6, f"decay sequences for r in {{1,2,3}} match c - r*t exactly ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# 7. gradient correctness
# ---------------------------------------------------------------------------


def _fd_worst_rel(net, image, labels, weights, mode, n_coords, rng, margin=None):
    from bitfcn.graph import forward as fwd

    _, grads, _ = backward(net, image, labels, [8, 4], weights, mode=mode)
    names = sorted(net.params)
    worst = 0.0
    checked = 0
    while checked < n_coords:
        name = names[int(rng.integers(len(names)))]
        p = net.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        if margin and name.endswith(".w") and abs(abs(p[idx]) - 1.0) < margin:
            continue
        h = 1e-6 * max(1.0, abs(p[idx]))
        orig = p[idx]
        p[idx] = orig + h
        lp = stagewise_loss(fwd(net, image, mode=mode, training=True)[0], labels, [8, 4], weights)
        p[idx] = orig - h
        lm = stagewise_loss(fwd(net, image, mode=mode, training=True)[0], labels, [8, 4], weights)
        p[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        checked += 1
    return worst


def test_criterion_07_gradient_correctness():
    t0 = time.perf_counter()
    rng = RNG(707)
    image = rng.random((2, 3, 16, 16))
    labels = rng.integers(0, 3, (2, 16, 16))
    labels[0, :2, :] = 255
    weights = np.array([1.0, 2.0, 0.5])

    fp_net = build_toy_bfcn(3, 3, 4, "residual", QuantSpec(FULL_PRECISION, FULL_PRECISION), init_seed=1)
    worst_fp = _fd_worst_rel(fp_net, image, labels, weights, "dequant", 50, rng)
    assert worst_fp <= 1e-3

    q_net = build_toy_bfcn(3, 3, 4, "single", QuantSpec(2, 2), init_seed=2)
    worst_q = _fd_worst_rel(q_net, image, labels, weights, "surrogate", 50, rng, margin=0.01)
    assert worst_q <= 1e-3
    dt = time.perf_counter() - t0
    assert dt < 300.0
    report(7, f"FD worst rel err: full-precision {worst_fp:.2e}, clamp-surrogate {worst_q:.2e} ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# 8 & 9: training-based criteria
# ---------------------------------------------------------------------------


def make_split(seed, n_train, n_val, hw, classes=5):
    train = [generate_toy_scene((seed, 0, i), hw, hw, classes) for i in range(n_train)]
    val = [generate_toy_scene((seed, 1, i), hw, hw, classes) for i in range(n_val)]
    return SplitData(train, val)


def run_recipe(data, *, kw, ka, variant="residual", route="p1", decay_rate=None,
               iters=400, seed=0, lr=0.02, batch=4, width=8,
               decay_step_iters=None, pretrain_iters=None, stage_starts=(0, 60)):
    # stage_starts is pinned, not derived from iters, so seed-paired arms with
    # different totals still share an identical pretrain
    cfg = TrainConfig(lr=lr, momentum=0.9, batch=batch, iters=iters, route=route,
                      stage_schedule=list(stage_starts))
    result = train_bfcn(data, k_w=kw, k_a=ka, variant=variant, base_width=width,
                        num_classes=5, seed=seed, cfg=cfg, decay_rate=decay_rate,
                        decay_step_iters=decay_step_iters,
                        pretrain_iters=pretrain_iters, eval_stages=False)
    mode = "bit" if kw != FULL_PRECISION else "dequant"
    return evaluate_miou(result.net, data.val, mode=mode)[0]


def test_criterion_08_toy_task_learnability():
    t0 = time.perf_counter()
    data = make_split(800, 160, 48, 64)

    cfg = TrainConfig(lr=0.02, momentum=0.9, batch=4, iters=1200, route="p1-8bit",
                      stage_schedule=[0, 140])
    result = train_bfcn(data, k_w=2, k_a=2, variant="residual", base_width=8,
                        num_classes=5, seed=0, cfg=cfg, decay_rate=1,
                        eval_stages=False)
    miou_22 = evaluate_miou(result.net, data.val, mode="bit")[0]

    fp_cfg = TrainConfig(lr=0.02, momentum=0.9, batch=4, iters=550, route="p1",
                         stage_schedule=[0, 130])
    fp_result = train_bfcn(data, k_w=FULL_PRECISION, k_a=FULL_PRECISION,
                           variant="residual", base_width=8, num_classes=5,
                           seed=0, cfg=fp_cfg, eval_stages=False)
    miou_fp = evaluate_miou(fp_result.net, data.val, mode="dequant")[0]

    dt = time.perf_counter() - t0
    assert dt < 900.0, f"budget exceeded: {dt:.0f}s"
    assert miou_22 >= 0.70, f"2-2 mIoU {miou_22:.4f} < 0.70"
    assert miou_fp >= 0.80, f"full-precision mIoU {miou_fp:.4f} < 0.80"
    report(8, f"2-2 decay-trained mIoU {miou_22:.4f} >= 0.70; full-precision {miou_fp:.4f} >= 0.80 ({dt:.0f}s)")


SEEDS = [11, 22, 33, 44, 55]


def medians(data, runs, cache):
    """Median val mIoU over the paired seeds; identical configs are trained
    once and reused across orderings (training is deterministic per seed)."""
    out = {}
    for tag, kwargs in runs.items():
        key = tuple(sorted(kwargs.items()))
        if key not in cache:
            cache[key] = [run_recipe(data, seed=s, **kwargs) for s in SEEDS]
        out[tag] = statistics.median(cache[key])
    return out


def test_criterion_09_ordering_reproductions():
    """Seed-paired ordering reproductions on 32x32 scenes, where segmentation
    quality is boundary-dominated and the reconstruction branches carry real
    weight. The decay-vs-direct pair compares the two initialization
    procedures entering the same final fine-tune budget (the stepwise
    procedure fine-tunes every intermediate bit-width for the same per-stage
    budget); all other pairs share one total budget."""
    t0 = time.perf_counter()
    data = make_split(900, 96, 64, 32)
    cache = {}

    m_var = medians(data, {
        "residual": dict(kw=2, ka=2, variant="residual", route="p1-8bit", iters=480),
        "single": dict(kw=2, ka=2, variant="single", route="p1-8bit", iters=480),
    }, cache)
    m_decay = medians(data, {
        "decay1": dict(kw=2, ka=2, route="p1", decay_rate=1, iters=744,
                       decay_step_iters=72, pretrain_iters=240),
        "direct": dict(kw=2, ka=2, route="p1", iters=312, pretrain_iters=240),
    }, cache)
    # short budget: the route comparison is about initialization quality, and
    # from-scratch low bit-width training is the brittle arm it exposes
    m_route = medians(data, {
        "p1-8bit": dict(kw=2, ka=2, route="p1-8bit", iters=240),
        "p2": dict(kw=2, ka=2, route="p2", iters=240),
    }, cache)
    m_bits = medians(data, {
        "8-8": dict(kw=8, ka=8, route="p1-8bit", iters=480),
        "4-4": dict(kw=4, ka=4, route="p1-8bit", iters=480),
        "2-2": dict(kw=2, ka=2, variant="residual", route="p1-8bit", iters=480),
        "1-2": dict(kw=1, ka=2, route="p1-8bit", iters=480),
    }, cache)
    order = ["8-8", "4-4", "2-2", "1-2"]

    failures = []
    if m_var["residual"] < m_var["single"]:
        failures.append(f"(a) variant {m_var}")
    if m_decay["decay1"] < m_decay["direct"]:
        failures.append(f"(b) decay {m_decay}")
    if m_route["p1-8bit"] < m_route["p2"]:
        failures.append(f"(c) route {m_route}")
    for hi, lo in zip(order, order[1:]):
        if m_bits[hi] < m_bits[lo] - 0.02:
            failures.append(f"(d) bits {hi} vs {lo}: {m_bits}")
    assert not failures, failures

    dt = time.perf_counter() - t0
    assert dt < 3 * 3600
    detail = (f"variant {m_var['residual']:.3f}>={m_var['single']:.3f}; "
              f"decay {m_decay['decay1']:.3f}>={m_decay['direct']:.3f}; "
              f"route {m_route['p1-8bit']:.3f}>={m_route['p2']:.3f}; "
              f"bits {[round(m_bits[k], 3) for k in order]} ({dt:.0f}s)")
    report(9, detail)


# ---------------------------------------------------------------------------
# 10. bench ratios
# ---------------------------------------------------------------------------


def test_criterion_10_bench_ratios():
    t0 = time.perf_counter()
    report_obj = run_bench((1, 64, 32, 32), [(1, 1), (1, 2), (2, 2), (4, 4), (8, 8)],
                           reps=20)
    t12 = report_obj.row("1x2").median_ns
    t22 = report_obj.row("2x2").median_ns
    t44 = report_obj.row("4x4").median_ns
    r1 = t22 / t12
    r2 = t44 / t22
    assert 1.4 <= r1 <= 2.6, r1
    assert 2.8 <= r2 <= 5.2, r2
    assert predicted_speedup(1, 2, CPU_COST_MODEL) == 9.0
    assert predicted_speedup(2, 2, CPU_COST_MODEL) == 4.5
    # medians monotone non-decreasing in kernel count
    seq = [report_obj.row(c).median_ns for c in ("1x1", "1x2", "2x2", "4x4", "8x8")]
    assert all(a <= b for a, b in zip(seq, seq[1:])), seq
    dt = time.perf_counter() - t0
    assert dt < 300.0
    report(10, f"t(2,2)/t(1,2)={r1:.2f} in [1.4,2.6]; t(4,4)/t(2,2)={r2:.2f} in [2.8,5.2]; "
               f"predicted speedups exact ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# 11. storage
# ---------------------------------------------------------------------------


def test_criterion_11_storage_ratio():
    t0 = time.perf_counter()
    width = 160
    net1 = build_toy_bfcn(3, 5, width, "single", QuantSpec(1, 2), init_seed=0)
    net32 = build_toy_bfcn(3, 5, width, "single", QuantSpec(FULL_PRECISION, FULL_PRECISION), init_seed=0)
    conv_params = sum(g.out_ch * g.in_ch * g.kh * g.kw for _, g, _ in net1.conv_entries())
    extra_params = sum(p.size for n, p in net1.params.items() if not n.endswith(".w"))
    extra_params += sum(b.size for b in net1.buffers.values())
    share = extra_params / (conv_params + extra_params)
    assert share < 0.05, f"BN/bias share {share:.4f} not < 5%"
    s1 = parameter_size(net1)
    s32 = parameter_size(net32)
    assert s1 <= s32 / 30, (s1, s32, s32 / s1)
    dt = time.perf_counter() - t0
    assert dt < 1.0
    report(11, f"1-bit size {s1/1e6:.2f} MB vs 32-bit {s32/1e6:.2f} MB (ratio {s32/s1:.1f} >= 30, "
               f"BN/bias share {share:.3%}) ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# 12. quantizer property suite
# ---------------------------------------------------------------------------


def test_criterion_12_quantizer_properties():
    t0 = time.perf_counter()
    n = 100_000
    for k in range(1, 9):
        rng = RNG(1200 + k)
        x = rng.uniform(-0.25, 1.25, size=n)
        code, value = quantize_unit(x, k)
        # idempotence
        code2, value2 = quantize_unit(value, k)
        assert np.array_equal(value, value2) and np.array_equal(code, code2)
        # monotonicity via sort
        order = np.argsort(x, kind="stable")
        assert (np.diff(value[order]) >= 0).all()
        # max-commutation
        y = rng.uniform(-0.25, 1.25, size=n)
        cy, _ = quantize_unit(y, k)
        cmax, _ = quantize_unit(np.maximum(x, y), k)
        assert np.array_equal(cmax, np.maximum(code, cy))
        # tight error bound (1e-12 absorbs float evaluation noise of the bound)
        err = np.abs(value - np.clip(x, 0, 1))
        assert err.max() <= 1.0 / (2 * ((1 << k) - 1)) + 1e-12
    dt = time.perf_counter() - t0
    assert dt < 30.0
    report(12, f"idempotence, monotonicity, max-commutation, tight bound: 10^5 samples x k in 1..8 ({dt:.1f}s)")
