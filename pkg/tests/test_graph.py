import numpy as np
import pytest

from bitfcn.bitconv import ConvGeom, conv2d_reference
from bitfcn.errors import BadConfig, BadLabels, NonDivisibleInput
from bitfcn.graph import (
    BN_EPS,
    SegNet,
    backward,
    build_toy_bfcn,
    downsample_labels,
    forward,
    load_model,
    predict,
    save_model,
    stagewise_loss,
    stagewise_loss_and_grad,
)
from bitfcn.quantize import FULL_PRECISION, QuantSpec

FP = QuantSpec(FULL_PRECISION, FULL_PRECISION)


def small_image(seed=0, n=2, hw=16):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, hw, hw))


def small_labels(seed=1, n=2, hw=16, c=3):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, c, (n, hw, hw))
    lab[0, 0, :4] = 255
    return lab


# ---------------------------------------------------------------------------
# independent reference forward (direct-loop convs, explicit BN algebra)
# ---------------------------------------------------------------------------


def ref_conv_bn_act(x, net, name, geom):
    y = conv2d_reference(x, net.params[f"{name}.w"], geom)
    g, b = net.params[f"{name}.bn.gamma"], net.params[f"{name}.bn.beta"]
    m, v = net.buffers[f"{name}.bn.rmean"], net.buffers[f"{name}.bn.rvar"]
    y = (y - m[None, :, None, None]) / np.sqrt(v + BN_EPS)[None, :, None, None]
    y = g[None, :, None, None] * y + b[None, :, None, None]
    return np.clip(y, 0, 1)


def ref_residual(x, net, name, geom):
    g1 = geom
    g2 = ConvGeom(g1.out_ch, g1.out_ch, 3, 3, 1, 1)
    h = conv2d_reference(x, net.params[f"{name}.conv1.w"], g1)
    for bn, t in (("bn1", None),):
        gg, bb = net.params[f"{name}.{bn}.gamma"], net.params[f"{name}.{bn}.beta"]
        mm, vv = net.buffers[f"{name}.{bn}.rmean"], net.buffers[f"{name}.{bn}.rvar"]
        h = gg[None, :, None, None] * (h - mm[None, :, None, None]) / np.sqrt(vv + BN_EPS)[None, :, None, None] + bb[None, :, None, None]
    h = np.clip(h, 0, 1)
    h = conv2d_reference(h, net.params[f"{name}.conv2.w"], g2)
    gg, bb = net.params[f"{name}.bn2.gamma"], net.params[f"{name}.bn2.beta"]
    mm, vv = net.buffers[f"{name}.bn2.rmean"], net.buffers[f"{name}.bn2.rvar"]
    h = gg[None, :, None, None] * (h - mm[None, :, None, None]) / np.sqrt(vv + BN_EPS)[None, :, None, None] + bb[None, :, None, None]
    if f"{name}.proj.w" in net.params:
        gp = ConvGeom(g1.in_ch, g1.out_ch, 1, 1, g1.stride, 0)
        s = conv2d_reference(x, net.params[f"{name}.proj.w"], gp)
        gg, bb = net.params[f"{name}.bnp.gamma"], net.params[f"{name}.bnp.beta"]
        mm, vv = net.buffers[f"{name}.bnp.rmean"], net.buffers[f"{name}.bnp.rvar"]
        s = gg[None, :, None, None] * (s - mm[None, :, None, None]) / np.sqrt(vv + BN_EPS)[None, :, None, None] + bb[None, :, None, None]
    else:
        s = x
    return np.clip(h + s, 0, 1)


def ref_head(x, net, name, geom):
    y = conv2d_reference(x, net.params[f"{name}.w"], geom)
    return y + net.params[f"{name}.b"][None, :, None, None]


def ref_forward_single_variant(net, image):
    w = net.base_width
    x = ref_conv_bn_act(image, net, "stem", ConvGeom(3, w, 3, 3, 1, 1))
    x1 = ref_residual(x, net, "stage1", ConvGeom(w, w, 3, 3, 2, 1))
    x2 = ref_residual(x1, net, "stage2", ConvGeom(w, 2 * w, 3, 3, 2, 1))
    x3 = ref_residual(x2, net, "stage3", ConvGeom(2 * w, 4 * w, 3, 3, 2, 1))
    r8 = ref_conv_bn_act(x3, net, "recon8", ConvGeom(4 * w, 4 * w, 3, 3, 1, 1))
    l8 = ref_head(r8, net, "head8", ConvGeom(4 * w, net.num_classes, 1, 1, 1, 0))
    up = np.repeat(np.repeat(l8, 2, axis=2), 2, axis=3)
    r4 = ref_conv_bn_act(x2, net, "recon4", ConvGeom(2 * w, 2 * w, 3, 3, 1, 1))
    l4 = up + ref_head(r4, net, "head4", ConvGeom(2 * w, net.num_classes, 1, 1, 1, 0))
    return {8: l8, 4: l4}


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def test_variant_conv_counts():
    nets = {v: build_toy_bfcn(3, 5, 8, v, QuantSpec(2, 2)) for v in ("single", "wide", "residual")}
    n_single = nets["single"].conv_count()
    n_resid = nets["residual"].conv_count()
    assert n_resid == n_single + 2  # one extra conv per reconstruction branch
    assert nets["wide"].conv_count() == n_single


def test_residual_recon_has_identity_shortcut():
    net = build_toy_bfcn(3, 5, 8, "residual", QuantSpec(2, 2))
    assert "recon8.proj.w" not in net.params  # in == out, stride 1
    assert "stage1.proj.w" in net.params  # stride 2 needs projection


def test_first_layer_is_8bit_when_quantized():
    net = build_toy_bfcn(3, 5, 8, "single", QuantSpec(2, 2))
    assert net.by_name["stem"].quant == QuantSpec(8, 8)
    assert net.by_name["recon8"].quant == QuantSpec(2, 2)
    fp_net = build_toy_bfcn(3, 5, 8, "single", FP)
    assert fp_net.by_name["stem"].quant == FP


def test_set_bit_width_respects_first_layer():
    net = build_toy_bfcn(3, 5, 8, "single", QuantSpec(8, 8))
    net.set_bit_width(2, 2)
    assert net.by_name["stem"].quant == QuantSpec(8, 8)
    assert net.by_name["head4"].quant == QuantSpec(2, 2)
    net.set_bit_width(FULL_PRECISION, FULL_PRECISION)
    assert net.by_name["stem"].quant == FP


def test_build_validation():
    with pytest.raises(BadConfig):
        build_toy_bfcn(3, 1, 8, "single", FP)
    with pytest.raises(BadConfig):
        build_toy_bfcn(3, 5, 2, "single", FP)
    with pytest.raises(BadConfig):
        build_toy_bfcn(3, 5, 8, "huge", FP)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_zero_image_zero_bias_gives_zero_logits():
    net = build_toy_bfcn(3, 4, 8, "single", QuantSpec(2, 2))
    for name, p in net.params.items():
        if name.endswith(".beta") or name.endswith(".b"):
            p[:] = 0.0
    image = np.zeros((1, 3, 16, 16))
    for mode in ("bit", "dequant", "surrogate"):
        logits, _ = forward(net, image, mode=mode, training=False)
        for s, z in logits.items():
            assert not z.any(), (mode, s)


def test_fp_forward_matches_hand_reference():
    net = build_toy_bfcn(3, 5, 8, "single", FP, init_seed=3)
    image = small_image(4)
    logits, _ = forward(net, image, mode="dequant", training=False)
    ref = ref_forward_single_variant(net, image)
    for s in (8, 4):
        assert np.abs(logits[s] - ref[s]).max() < 1e-5


def test_bit_vs_dequant_paths_agree():
    net = build_toy_bfcn(3, 5, 8, "residual", QuantSpec(2, 2), init_seed=5)
    # jitter off the fresh-init grid: the exact-integer bit path and the float
    # path may legitimately round a value sitting exactly on a quantizer tie
    # in opposite directions, and beta=0.5 puts zero-window activations there
    rng = np.random.default_rng(99)
    for p in net.params.values():
        p += rng.normal(0.0, 1e-3, size=p.shape)
    image = small_image(6)
    bit_logits, _ = forward(net, image, mode="bit", training=False)
    deq_logits, _ = forward(net, image, mode="dequant", training=False)
    for s in (8, 4):
        assert np.abs(bit_logits[s] - deq_logits[s]).max() <= 1e-4


def test_forward_determinism_bit_exact():
    net = build_toy_bfcn(3, 5, 8, "residual", QuantSpec(2, 2), init_seed=7)
    image = small_image(8)
    a, _ = forward(net, image, mode="bit", training=False)
    b, _ = forward(net, image, mode="bit", training=False)
    for s in (8, 4):
        assert np.array_equal(a[s], b[s])


def test_branch_independence():
    net = build_toy_bfcn(3, 5, 8, "residual", QuantSpec(2, 2), init_seed=9)
    image = small_image(10)
    full, _ = forward(net, image, mode="bit", training=False)
    coarse_only, _ = forward(net, image, mode="bit", training=False, active_scales=[8])
    assert np.array_equal(full[8], coarse_only[8])
    assert 4 not in coarse_only


def test_non_divisible_input_rejected():
    net = build_toy_bfcn(3, 5, 8, "single", FP)
    with pytest.raises(NonDivisibleInput):
        forward(net, np.zeros((1, 3, 20, 16)))


def test_variant_ops_ordering():
    image = small_image(11, n=1, hw=32)
    macs = {}
    for v in ("single", "wide", "residual"):
        net = build_toy_bfcn(3, 5, 8, v, QuantSpec(2, 2), init_seed=1)
        _, tape = forward(net, image, mode="dequant", training=False)
        macs[v] = tape.macs
    assert macs["single"] < macs["residual"] < macs["wide"]


def test_predict_shape_and_range():
    net = build_toy_bfcn(3, 5, 8, "single", QuantSpec(2, 2), init_seed=2)
    image = small_image(12, n=2, hw=16)
    lab = predict(net, image)
    assert lab.shape == (2, 16, 16)
    assert lab.min() >= 0 and lab.max() < 5


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_uniform_logits_loss_is_log_c():
    c = 5
    logits = {8: np.zeros((2, c, 2, 2)), 4: np.zeros((2, c, 4, 4))}
    labels = np.random.default_rng(0).integers(0, c, (2, 16, 16))
    w = np.ones(c)
    one = stagewise_loss(logits, labels, [8], w)
    both = stagewise_loss(logits, labels, [8, 4], w)
    assert one == pytest.approx(np.log(c))
    assert both == pytest.approx(2 * np.log(c))


def test_perfect_logits_loss_vanishes():
    c = 3
    labels = np.random.default_rng(1).integers(0, c, (1, 8, 8))
    lab8 = labels[:, 4::8, 4::8]
    z = np.zeros((1, c, 1, 1))
    z[0, :, 0, 0] = -100.0
    z[0, lab8[0, 0, 0], 0, 0] = 100.0
    assert stagewise_loss({8: z}, labels, [8], np.ones(c)) == pytest.approx(0.0, abs=1e-12)


def test_weighted_ce_hand_case():
    # 2 classes on a 2x2 map at scale 1-like granularity: use scale 4 with 8x8 labels
    logits = np.array([[[[2.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [2.0, -1.0]]]])
    labels = np.zeros((1, 8, 8), dtype=int)
    labels[0, :, :] = 0
    labels[0, 4:, :] = 1  # bottom row of the 2x2 downsample is class 1
    w = np.array([1.0, 2.0])
    dl = downsample_labels(labels, 4)
    assert dl[0].tolist() == [[0, 0], [1, 1]]

    def ce(z0, z1, y):
        m = max(z0, z1)
        logp = np.array([z0 - m, z1 - m]) - np.log(np.exp(z0 - m) + np.exp(z1 - m))
        return -logp[y]

    expected = (
        1.0 * ce(2.0, 0.0, 0) + 1.0 * ce(0.0, 1.0, 0)
        + 2.0 * ce(0.0, 2.0, 1) + 2.0 * ce(1.0, -1.0, 1)
    ) / 4
    got = stagewise_loss({4: logits}, labels, [4], w)
    assert got == pytest.approx(expected)


def test_loss_ignores_255_and_validates():
    c = 3
    logits = {8: np.zeros((1, c, 2, 2))}
    labels = np.full((1, 16, 16), 255)
    loss, grads = stagewise_loss_and_grad(logits, labels, [8], np.ones(c))
    assert loss == 0.0 and not grads[8].any()
    labels = np.full((1, 16, 16), c)  # out of range, not ignore
    with pytest.raises(BadLabels):
        stagewise_loss(logits, labels, [8], np.ones(c))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_zero_upstream_gives_zero_grads():
    net = build_toy_bfcn(3, 3, 4, "single", FP, init_seed=0)
    image = small_image(0, n=1)
    labels = np.full((1, 16, 16), 255)  # everything ignored: loss detached
    loss, grads, _ = backward(net, image, labels, [8, 4], np.ones(3))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def fd_check(net, image, labels, weights, mode, n_coords, rel_tol, rng,
             boundary_margin=None):
    loss, grads, _ = backward(net, image, labels, [8, 4], weights, mode=mode)
    names = sorted(net.params)
    checked = 0
    worst = 0.0
    while checked < n_coords:
        name = names[int(rng.integers(len(names)))]
        p = net.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        if boundary_margin and name.endswith(".w") and abs(abs(p[idx]) - 1.0) < boundary_margin:
            continue
        h = 1e-6 * max(1.0, abs(p[idx]))
        orig = p[idx]
        p[idx] = orig + h
        lp = stagewise_loss(forward(net, image, mode=mode, training=True)[0], labels, [8, 4], weights)
        p[idx] = orig - h
        lm = stagewise_loss(forward(net, image, mode=mode, training=True)[0], labels, [8, 4], weights)
        p[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name][idx]
        denom = max(abs(fd), abs(an), 1e-6)
        worst = max(worst, abs(fd - an) / denom)
        checked += 1
    assert worst <= rel_tol, worst


def test_fp_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    net = build_toy_bfcn(3, 3, 4, "residual", FP, init_seed=1)
    fd_check(net, small_image(1), small_labels(2), np.array([1.0, 2.0, 0.5]),
             "dequant", 25, 1e-3, rng)


def test_quantized_gradients_match_clamp_surrogate_fd():
    rng = np.random.default_rng(22)
    net = build_toy_bfcn(3, 3, 4, "single", QuantSpec(2, 2), init_seed=2)
    fd_check(net, small_image(3), small_labels(4), np.ones(3),
             "surrogate", 25, 1e-3, rng, boundary_margin=0.01)


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------


def test_model_roundtrip(tmp_path):
    net = build_toy_bfcn(3, 5, 8, "residual", QuantSpec(2, 2), init_seed=13)
    velocity = {k: np.random.default_rng(0).normal(size=v.shape) for k, v in net.params.items()}
    path = str(tmp_path / "m.bfcn")
    save_model(path, net, velocity)
    net2, vel2 = load_model(path)
    assert net2.num_classes == net.num_classes
    assert net2.variant == net.variant
    assert [l.name for l in net2.layers] == [l.name for l in net.layers]
    assert [l.kind for l in net2.layers] == [l.kind for l in net.layers]
    assert net2.by_name["stem"].quant == QuantSpec(8, 8)
    for k in net.params:
        assert np.allclose(net2.params[k], net.params[k], atol=1e-6)
    for k in velocity:
        assert np.allclose(vel2[k], velocity[k], atol=1e-6)
    # a loaded model is exactly reproducible
    image = small_image(14)
    a, _ = forward(net2, image, mode="bit")
    net3, _ = load_model(path)
    b, _ = forward(net3, image, mode="bit")
    for s in (8, 4):
        assert np.array_equal(a[s], b[s])


def test_model_roundtrip_without_velocity(tmp_path):
    net = build_toy_bfcn(3, 4, 8, "single", FP, init_seed=15)
    path = str(tmp_path / "m.bfcn")
    save_model(path, net)
    net2, vel = load_model(path)
    assert vel is None
    assert net2.by_name["stem"].quant == FP
