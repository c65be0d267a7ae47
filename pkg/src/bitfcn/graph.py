"""Miniature low bit-width FCN: residual extractor, coarse-to-fine
reconstruction branches with per-scale prediction heads, forward and
reverse passes, and stage-wise weighted cross-entropy losses.

Execution modes for quantized convolutions:
- "bit":       quantize -> packed bit-plane kernels -> dequantize (production)
- "dequant":   quantize -> float convolution of the dequantized tensors
               (numerically identical to "bit" up to a few ulps)
- "surrogate": clamps only, no rounding; the function whose exact gradient
               the straight-through backward computes
Full-precision layers (k = 32) run the float path in every mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .bitconv import (
    ConvGeom,
    bitconv2d_with_sums,
    col2im,
    conv2d_im2col,
    dequantize_conv,
    im2col,
    weight_code_sums,
)
from .bitpack import pack, read_btsr, write_btsr
from .errors import (
    BadConfig,
    BadLabels,
    NonDivisibleInput,
    ShapeMismatch,
)
from .quantize import (
    FULL_PRECISION,
    QuantSpec,
    quantize_activations,
    quantize_weights,
    ste_grad,
)

IGNORE_LABEL = 255
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

KIND_INPUT = "input"
KIND_CONV = "conv-bn-act"
KIND_RESIDUAL = "residual-block"
KIND_UPSAMPLE = "upsample-2x"
KIND_HEAD = "predict-head"
KIND_ADD = "add"

VARIANT_SINGLE = "single"
VARIANT_WIDE = "wide"
VARIANT_RESIDUAL = "residual"
VARIANTS = (VARIANT_SINGLE, VARIANT_WIDE, VARIANT_RESIDUAL)

MODES = ("bit", "dequant", "surrogate")

_KIND_CODES = {
    KIND_INPUT: 0,
    KIND_CONV: 1,
    KIND_RESIDUAL: 2,
    KIND_UPSAMPLE: 3,
    KIND_HEAD: 4,
    KIND_ADD: 5,
}
_KIND_FROM_CODE = {v: k for k, v in _KIND_CODES.items()}
MODEL_MAGIC = b"BFCN"
MODEL_VERSION = 1


@dataclass
class LayerSpec:
    """One DAG node. geom applies to conv-like kinds; for residual blocks it
    is the first conv (in -> out, stride s); the second conv and the optional
    1x1 projection shortcut are derived from it."""

    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    geom: ConvGeom | None = None
    quant: QuantSpec = field(default_factory=lambda: QuantSpec(FULL_PRECISION, FULL_PRECISION))

    def residual_geoms(self):
        g1 = self.geom
        g2 = ConvGeom(g1.out_ch, g1.out_ch, g1.kh, g1.kw, 1, g1.pad)
        needs_proj = g1.in_ch != g1.out_ch or g1.stride != 1
        gp = ConvGeom(g1.in_ch, g1.out_ch, 1, 1, g1.stride, 0) if needs_proj else None
        return g1, g2, gp


class SegNet:
    """Layer DAG plus full-precision master parameters and BN buffers."""

    def __init__(self, layers, num_classes, scales, scale_outputs, variant,
                 base_width, in_ch, first_conv):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise BadConfig("duplicate layer names")
        seen = set()
        n_inputs = 0
        for layer in layers:
            for src in layer.inputs:
                if src not in seen:
                    raise BadConfig(f"layer {layer.name} input {src} not defined before it")
            if layer.kind == KIND_INPUT:
                n_inputs += 1
            seen.add(layer.name)
        if n_inputs != 1:
            raise BadConfig(f"exactly one input node required, found {n_inputs}")
        self.layers = list(layers)
        self.by_name = {l.name: l for l in layers}
        self.num_classes = int(num_classes)
        self.scales = list(scales)
        self.scale_outputs = dict(scale_outputs)
        self.variant = variant
        self.base_width = int(base_width)
        self.in_ch = int(in_ch)
        self.first_conv = first_conv
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    @property
    def max_stride(self) -> int:
        return max(self.scales)

    @property
    def finest_scale(self) -> int:
        return min(self.scales)

    def conv_entries(self):
        """Yield (param_name, geom, quant) for every conv filter, including the
        sub-convs of residual blocks."""
        for layer in self.layers:
            if layer.kind in (KIND_CONV, KIND_HEAD):
                yield f"{layer.name}.w", layer.geom, layer.quant
            elif layer.kind == KIND_RESIDUAL:
                g1, g2, gp = layer.residual_geoms()
                yield f"{layer.name}.conv1.w", g1, layer.quant
                yield f"{layer.name}.conv2.w", g2, layer.quant
                if gp is not None:
                    yield f"{layer.name}.proj.w", gp, layer.quant

    def conv_count(self) -> int:
        return sum(1 for _ in self.conv_entries())

    def set_bit_width(self, k_w: int, k_a: int) -> None:
        """Point every quantized layer at (k_w, k_a); the first conv keeps
        8-bit weights and 8-bit (image) input whenever the net is quantized."""
        full = k_w == FULL_PRECISION and k_a == FULL_PRECISION
        for layer in self.layers:
            if layer.kind not in (KIND_CONV, KIND_RESIDUAL, KIND_HEAD):
                continue
            if layer.name == self.first_conv:
                layer.quant = QuantSpec(FULL_PRECISION, FULL_PRECISION) if full else QuantSpec(8, 8)
            else:
                layer.quant = QuantSpec(k_w, k_a)


def _he_conv(rng, geom: ConvGeom) -> np.ndarray:
    std = np.sqrt(2.0 / geom.n_taps)
    return rng.normal(0.0, std, size=(geom.out_ch, geom.in_ch, geom.kh, geom.kw))


def _register_bn(net: SegNet, prefix: str, ch: int, gamma: float = 0.5,
                 beta: float = 0.5) -> None:
    net.params[f"{prefix}.gamma"] = np.full(ch, gamma)
    net.params[f"{prefix}.beta"] = np.full(ch, beta)
    net.buffers[f"{prefix}.rmean"] = np.zeros(ch)
    net.buffers[f"{prefix}.rvar"] = np.ones(ch)


def _register_layer_params(net: SegNet, layer: LayerSpec, rng) -> None:
    if layer.kind == KIND_CONV:
        net.params[f"{layer.name}.w"] = _he_conv(rng, layer.geom)
        _register_bn(net, f"{layer.name}.bn", layer.geom.out_ch)
    elif layer.kind == KIND_HEAD:
        net.params[f"{layer.name}.w"] = _he_conv(rng, layer.geom)
        net.params[f"{layer.name}.b"] = np.zeros(layer.geom.out_ch)
    elif layer.kind == KIND_RESIDUAL:
        g1, g2, gp = layer.residual_geoms()
        net.params[f"{layer.name}.conv1.w"] = _he_conv(rng, g1)
        _register_bn(net, f"{layer.name}.bn1", g1.out_ch)
        net.params[f"{layer.name}.conv2.w"] = _he_conv(rng, g2)
        # identity-start branch: keeps shortcut + branch inside the clamp's
        # pass band at init instead of saturating half the outputs
        _register_bn(net, f"{layer.name}.bn2", g2.out_ch, gamma=0.25, beta=0.0)
        if gp is not None:
            net.params[f"{layer.name}.proj.w"] = _he_conv(rng, gp)
            _register_bn(net, f"{layer.name}.bnp", gp.out_ch)


def build_toy_bfcn(in_ch: int, num_classes: int, base_width: int, variant: str,
                   quant: QuantSpec, init_seed: int = 0) -> SegNet:
    """Desk-scale net: stride-1 stem (the 8-bit first layer), three stride-2
    residual stages (strides 2/4/8), reconstruction branches at strides 8 and
    4 combined coarse-to-fine by nearest upsample + add."""
    if base_width < 4:
        raise BadConfig(f"base_width must be >= 4, got {base_width}")
    if num_classes < 2:
        raise BadConfig(f"num_classes must be >= 2, got {num_classes}")
    if variant not in VARIANTS:
        raise BadConfig(f"variant must be one of {VARIANTS}, got {variant!r}")

    w = base_width
    fp = QuantSpec(FULL_PRECISION, FULL_PRECISION)
    q = quant if quant.quantized else fp
    first_q = QuantSpec(8, 8) if quant.quantized else fp

    def recon(name, src, ch):
        """Reconstruction filter per variant; returns (layers, out_ch)."""
        if variant == VARIANT_SINGLE:
            return [LayerSpec(name, KIND_CONV, [src], ConvGeom(ch, ch, 3, 3, 1, 1), q)], ch
        if variant == VARIANT_WIDE:
            return [LayerSpec(name, KIND_CONV, [src], ConvGeom(ch, 2 * ch, 3, 3, 1, 1), q)], 2 * ch
        return [LayerSpec(name, KIND_RESIDUAL, [src], ConvGeom(ch, ch, 3, 3, 1, 1), q)], ch

    layers = [
        LayerSpec("image", KIND_INPUT),
        LayerSpec("stem", KIND_CONV, ["image"], ConvGeom(in_ch, w, 3, 3, 1, 1), first_q),
        LayerSpec("stage1", KIND_RESIDUAL, ["stem"], ConvGeom(w, w, 3, 3, 2, 1), q),
        LayerSpec("stage2", KIND_RESIDUAL, ["stage1"], ConvGeom(w, 2 * w, 3, 3, 2, 1), q),
        LayerSpec("stage3", KIND_RESIDUAL, ["stage2"], ConvGeom(2 * w, 4 * w, 3, 3, 2, 1), q),
    ]
    # 1x1 prediction heads: the reconstruction filter carries all spatial
    # context in a branch
    r8, r8_ch = recon("recon8", "stage3", 4 * w)
    layers += r8
    layers.append(LayerSpec("head8", KIND_HEAD, ["recon8"], ConvGeom(r8_ch, num_classes, 1, 1, 1, 0), q))
    layers.append(LayerSpec("up8", KIND_UPSAMPLE, ["head8"]))
    r4, r4_ch = recon("recon4", "stage2", 2 * w)
    layers += r4
    layers.append(LayerSpec("head4", KIND_HEAD, ["recon4"], ConvGeom(r4_ch, num_classes, 1, 1, 1, 0), q))
    layers.append(LayerSpec("logits4", KIND_ADD, ["up8", "head4"]))

    net = SegNet(layers, num_classes, [8, 4], {8: "head8", 4: "logits4"},
                 variant, base_width, in_ch, first_conv="stem")
    rng = np.random.default_rng(init_seed)
    for layer in net.layers:
        _register_layer_params(net, layer, rng)
    return net


# ---------------------------------------------------------------------------
# Forward / backward machinery
# ---------------------------------------------------------------------------


def _clamp01(x):
    return np.clip(x, 0.0, 1.0)


def _qconv_forward(x, w, geom: ConvGeom, quant: QuantSpec, mode: str):
    """One convolution under the layer's quantization config.

    Returns (y, cache); cache carries the tensors the backward pass needs:
    the values actually convolved plus the pre-clamp masters for the STE.
    """
    w_q = quant.k_w != FULL_PRECISION
    a_q = quant.k_a != FULL_PRECISION
    if mode == "surrogate":
        a_used = _clamp01(x) if a_q else x
        w_used = np.clip(w, -1.0, 1.0) if w_q else w
        y = conv2d_im2col(a_used, w_used, geom)
    else:
        qa = quantize_activations(x, quant.k_a) if a_q else None
        qw = quantize_weights(w, quant.k_w) if w_q else None
        a_used = qa.values if a_q else x
        w_used = qw.values if w_q else w
        if mode == "bit" and a_q and w_q:
            acts_t = pack(qa.codes, quant.k_a)
            w_t = pack(qw.codes, quant.k_w)
            acc, sums = bitconv2d_with_sums(acts_t, w_t, geom)
            y = dequantize_conv(acc, quant, sums, weight_code_sums(w_t), geom.n_taps)
        else:
            y = conv2d_im2col(a_used, w_used, geom)
    oh, ow = y.shape[2], y.shape[3]
    macs = x.shape[0] * oh * ow * geom.n_taps * geom.out_ch
    cache = {"a": a_used, "w": w_used, "x": x, "w_master": w,
             "a_q": a_q, "w_q": w_q, "macs": macs}
    return y, cache


def _qconv_backward(dy, cache, geom: ConvGeom):
    a, w_used = cache["a"], cache["w"]
    cols, _ = im2col(a, geom)
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, geom.out_ch)
    dw = (dy_mat.T @ cols).reshape(w_used.shape)
    dcols = dy_mat @ w_used.reshape(geom.out_ch, geom.n_taps)
    dx = col2im(dcols, a.shape, geom)
    if cache["w_q"]:
        dw = ste_grad(dw, cache["w_master"], -1.0, 1.0)
    if cache["a_q"]:
        dx = ste_grad(dx, cache["x"], 0.0, 1.0)
    return dx, dw


def _bn_forward(x, gamma, beta, rmean, rvar, training: bool):
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        rmean *= 1.0 - BN_MOMENTUM
        rmean += BN_MOMENTUM * mu
        rvar *= 1.0 - BN_MOMENTUM
        rvar += BN_MOMENTUM * var
    else:
        mu, var = rmean, rvar
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, {"xhat": xhat, "inv": inv, "gamma": gamma, "training": training,
               "m": x.shape[0] * x.shape[2] * x.shape[3]}


def _bn_backward(dy, cache):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    gi = (gamma * inv)[None, :, None, None]
    if not cache["training"]:
        return dy * gi, dgamma, dbeta
    m = cache["m"]
    dx = gi / m * (m * dy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx, dgamma, dbeta


def _upsample2x(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2x_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _layer_forward(net: SegNet, layer: LayerSpec, x_list, mode, training):
    p, b = net.params, net.buffers
    name = layer.name
    if layer.kind == KIND_CONV:
        y1, cc = _qconv_forward(x_list[0], p[f"{name}.w"], layer.geom, layer.quant, mode)
        y2, cb = _bn_forward(y1, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                             b[f"{name}.bn.rmean"], b[f"{name}.bn.rvar"], training)
        return _clamp01(y2), {"conv": cc, "bn": cb, "pre": y2, "macs": cc["macs"]}
    if layer.kind == KIND_HEAD:
        y, cc = _qconv_forward(x_list[0], p[f"{name}.w"], layer.geom, layer.quant, mode)
        return y + p[f"{name}.b"][None, :, None, None], {"conv": cc, "macs": cc["macs"]}
    if layer.kind == KIND_RESIDUAL:
        g1, g2, gp = layer.residual_geoms()
        x = x_list[0]
        h1, c1 = _qconv_forward(x, p[f"{name}.conv1.w"], g1, layer.quant, mode)
        b1, cb1 = _bn_forward(h1, p[f"{name}.bn1.gamma"], p[f"{name}.bn1.beta"],
                              b[f"{name}.bn1.rmean"], b[f"{name}.bn1.rvar"], training)
        a1 = _clamp01(b1)
        h2, c2 = _qconv_forward(a1, p[f"{name}.conv2.w"], g2, layer.quant, mode)
        b2, cb2 = _bn_forward(h2, p[f"{name}.bn2.gamma"], p[f"{name}.bn2.beta"],
                              b[f"{name}.bn2.rmean"], b[f"{name}.bn2.rvar"], training)
        macs = c1["macs"] + c2["macs"]
        if gp is not None:
            sp, cp = _qconv_forward(x, p[f"{name}.proj.w"], gp, layer.quant, mode)
            sb, cbp = _bn_forward(sp, p[f"{name}.bnp.gamma"], p[f"{name}.bnp.beta"],
                                  b[f"{name}.bnp.rmean"], b[f"{name}.bnp.rvar"], training)
            macs += cp["macs"]
        else:
            sb, cp, cbp = x, None, None
        pre = b2 + sb
        return _clamp01(pre), {"conv1": c1, "bn1": cb1, "pre1": b1, "conv2": c2,
                               "bn2": cb2, "proj": cp, "bnp": cbp, "pre": pre,
                               "macs": macs}
    if layer.kind == KIND_UPSAMPLE:
        return _upsample2x(x_list[0]), {"macs": 0}
    if layer.kind == KIND_ADD:
        if x_list[0].shape != x_list[1].shape:
            raise ShapeMismatch(f"add inputs differ: {x_list[0].shape} vs {x_list[1].shape}")
        return x_list[0] + x_list[1], {"macs": 0}
    raise BadConfig(f"unknown layer kind {layer.kind}")


def _layer_backward(net: SegNet, layer: LayerSpec, dy, cache, grads):
    name = layer.name
    if layer.kind == KIND_CONV:
        dz = dy * ((cache["pre"] >= 0.0) & (cache["pre"] <= 1.0))
        dz, dgamma, dbeta = _bn_backward(dz, cache["bn"])
        grads[f"{name}.bn.gamma"] = dgamma
        grads[f"{name}.bn.beta"] = dbeta
        dx, dw = _qconv_backward(dz, cache["conv"], layer.geom)
        grads[f"{name}.w"] = dw
        return [dx]
    if layer.kind == KIND_HEAD:
        grads[f"{name}.b"] = dy.sum(axis=(0, 2, 3))
        dx, dw = _qconv_backward(dy, cache["conv"], layer.geom)
        grads[f"{name}.w"] = dw
        return [dx]
    if layer.kind == KIND_RESIDUAL:
        g1, g2, gp = layer.residual_geoms()
        dpre = dy * ((cache["pre"] >= 0.0) & (cache["pre"] <= 1.0))
        d2, dgamma2, dbeta2 = _bn_backward(dpre, cache["bn2"])
        grads[f"{name}.bn2.gamma"] = dgamma2
        grads[f"{name}.bn2.beta"] = dbeta2
        da1, dw2 = _qconv_backward(d2, cache["conv2"], g2)
        grads[f"{name}.conv2.w"] = dw2
        da1 = da1 * ((cache["pre1"] >= 0.0) & (cache["pre1"] <= 1.0))
        d1, dgamma1, dbeta1 = _bn_backward(da1, cache["bn1"])
        grads[f"{name}.bn1.gamma"] = dgamma1
        grads[f"{name}.bn1.beta"] = dbeta1
        dx, dw1 = _qconv_backward(d1, cache["conv1"], g1)
        grads[f"{name}.conv1.w"] = dw1
        if gp is not None:
            dsp, dgammap, dbetap = _bn_backward(dpre, cache["bnp"])
            grads[f"{name}.bnp.gamma"] = dgammap
            grads[f"{name}.bnp.beta"] = dbetap
            dxs, dwp = _qconv_backward(dsp, cache["proj"], gp)
            grads[f"{name}.proj.w"] = dwp
            dx = dx + dxs
        else:
            dx = dx + dpre
        return [dx]
    if layer.kind == KIND_UPSAMPLE:
        return [_upsample2x_backward(dy)]
    if layer.kind == KIND_ADD:
        return [dy, dy]
    raise BadConfig(f"unknown layer kind {layer.kind}")


@dataclass
class ForwardTape:
    outs: dict
    caches: dict
    order: list
    mode: str
    training: bool
    macs: int


def _needed_layers(net: SegNet, scales) -> list[str]:
    targets = {net.scale_outputs[s] for s in scales}
    needed = set()
    for layer in reversed(net.layers):
        if layer.name in targets or layer.name in needed:
            needed.add(layer.name)
            needed.update(layer.inputs)
    return [l.name for l in net.layers if l.name in needed]


def forward(net: SegNet, image, mode: str = "bit", training: bool = False,
            active_scales=None):
    """Run the net; returns ({scale: logits}, tape)."""
    if mode not in MODES:
        raise BadConfig(f"mode must be one of {MODES}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4 or image.shape[1] != net.in_ch:
        raise ShapeMismatch(f"image must be (N, {net.in_ch}, H, W), got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % net.max_stride or w % net.max_stride:
        raise NonDivisibleInput(f"{h}x{w} not divisible by max stride {net.max_stride}")
    scales = list(net.scales) if active_scales is None else sorted(
        set(active_scales), reverse=True)
    for s in scales:
        if s not in net.scales:
            raise BadConfig(f"unknown scale {s}; net has {net.scales}")

    outs, caches = {}, {}
    order = _needed_layers(net, scales)
    macs = 0
    for name in order:
        layer = net.by_name[name]
        if layer.kind == KIND_INPUT:
            outs[name] = image
            caches[name] = {"macs": 0}
            continue
        xs = [outs[src] for src in layer.inputs]
        outs[name], caches[name] = _layer_forward(net, layer, xs, mode, training)
        macs += caches[name]["macs"]
    logits = {s: outs[net.scale_outputs[s]] for s in scales}
    return logits, ForwardTape(outs, caches, order, mode, training, macs)


def predict(net: SegNet, image, mode: str = "bit") -> np.ndarray:
    """Per-pixel labels at input resolution from the finest-scale logits."""
    logits, _ = forward(net, image, mode=mode, training=False,
                        active_scales=[net.finest_scale])
    lab = np.argmax(logits[net.finest_scale], axis=1)
    s = net.finest_scale
    return np.repeat(np.repeat(lab, s, axis=1), s, axis=2)


def downsample_labels(labels: np.ndarray, s: int) -> np.ndarray:
    """Nearest-neighbor label downsample, sampling each s x s block center."""
    if s == 1:
        return labels
    off = s // 2
    return labels[:, off::s, off::s]


def stagewise_loss_and_grad(logits: dict, labels, active_scales, class_weights):
    """Class-weighted softmax cross-entropy summed over active scales.

    Per scale the loss is mean over labeled pixels of weight[y] * CE; pixels
    with the ignore label are excluded. Returns (loss, {scale: dlogits}).
    """
    labels = np.asarray(labels)
    weights = np.asarray(class_weights, dtype=np.float64)
    total = 0.0
    dlogits = {}
    for s in active_scales:
        z = logits[s]
        n, c, oh, ow = z.shape
        if weights.shape != (c,):
            raise ShapeMismatch(f"class_weights must have length {c}")
        lab = downsample_labels(labels, s)
        if lab.shape != (n, oh, ow):
            raise ShapeMismatch(f"labels {lab.shape} do not match logits {z.shape}")
        bad = (lab != IGNORE_LABEL) & ((lab < 0) | (lab >= c))
        if bad.any():
            raise BadLabels(f"labels must be in [0, {c}) or {IGNORE_LABEL}")
        mask = lab != IGNORE_LABEL
        n_labeled = int(mask.sum())
        if n_labeled == 0:
            dlogits[s] = np.zeros_like(z)
            continue
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        softmax = ez / ez.sum(axis=1, keepdims=True)
        logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
        safe = np.where(mask, lab, 0)
        picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
        wpix = np.where(mask, weights[safe], 0.0)
        total += float(-(wpix * np.where(mask, picked, 0.0)).sum() / n_labeled)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe[:, None, :, :], 1.0, axis=1)
        dlogits[s] = (softmax - onehot) * wpix[:, None, :, :] / n_labeled
    return total, dlogits


def stagewise_loss(logits: dict, labels, active_scales, class_weights) -> float:
    loss, _ = stagewise_loss_and_grad(logits, labels, active_scales, class_weights)
    return loss


def backward(net: SegNet, image, labels, active_scales, class_weights,
             mode: str = "bit"):
    """Forward (training statistics) + reverse pass.

    Returns (loss, grads, logits); grads holds one array per parameter,
    zero-filled for parameters outside the active subgraph.
    """
    logits, tape = forward(net, image, mode=mode, training=True,
                           active_scales=active_scales)
    loss, dlogits = stagewise_loss_and_grad(logits, labels, active_scales, class_weights)
    douts: dict[str, np.ndarray] = {}
    for s, g in dlogits.items():
        name = net.scale_outputs[s]
        douts[name] = douts.get(name, 0.0) + g
    grads: dict[str, np.ndarray] = {}
    for name in reversed(tape.order):
        if name not in douts:
            continue
        layer = net.by_name[name]
        if layer.kind == KIND_INPUT:
            continue
        dxs = _layer_backward(net, layer, douts.pop(name), tape.caches[name], grads)
        for src, dx in zip(layer.inputs, dxs):
            douts[src] = douts.get(src, 0.0) + dx
    for pname, value in net.params.items():
        if pname not in grads:
            grads[pname] = np.zeros_like(value)
    return loss, grads, logits


# ---------------------------------------------------------------------------
# Model file: magic "BFCN", version, header, layer table, tensor sections.
# Full-precision tensors ride in BTSR blocks with the k=255 float sentinel.
# ---------------------------------------------------------------------------


def _write_name(f: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_name(f: BinaryIO) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def _write_tensor_section(f: BinaryIO, tensors: dict) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_name(f, name)
        arr = np.asarray(tensors[name], dtype=np.float32)
        flat = arr.reshape((1, -1, 1, 1)) if arr.ndim != 4 else arr
        f.write(struct.pack("<B", arr.ndim == 4))
        write_btsr(f, flat)


def _read_tensor_section(f: BinaryIO) -> dict:
    (count,) = struct.unpack("<I", f.read(4))
    out = {}
    for _ in range(count):
        name = _read_name(f)
        (is4d,) = struct.unpack("<B", f.read(1))
        arr = read_btsr(f)
        out[name] = arr.astype(np.float64) if is4d else arr.astype(np.float64).reshape(-1)
    return out


def save_model(path: str, net: SegNet, velocity: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<BH", MODEL_VERSION, net.num_classes))
        f.write(struct.pack("<HHB", net.in_ch, net.base_width, VARIANTS.index(net.variant)))
        f.write(struct.pack("<B", len(net.scales)))
        for s in net.scales:
            f.write(struct.pack("<B", s))
            _write_name(f, net.scale_outputs[s])
        _write_name(f, net.first_conv)
        f.write(struct.pack("<H", len(net.layers)))
        for layer in net.layers:
            f.write(struct.pack("<B", _KIND_CODES[layer.kind]))
            g = layer.geom or ConvGeom(1, 1, 1, 1, 1, 0)
            f.write(struct.pack("<6H", g.in_ch, g.out_ch, g.kh, g.kw, g.stride, g.pad))
            f.write(struct.pack("<BB", layer.quant.k_w, layer.quant.k_a))
            _write_name(f, layer.name)
            f.write(struct.pack("<B", len(layer.inputs)))
            for src in layer.inputs:
                _write_name(f, src)
        _write_tensor_section(f, net.params)
        _write_tensor_section(f, net.buffers)
        _write_tensor_section(f, velocity or {})


def load_model(path: str):
    """Returns (net, velocity); velocity is None when none was appended."""
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise BadConfig(f"{path}: not a model file")
        version, num_classes = struct.unpack("<BH", f.read(3))
        if version != MODEL_VERSION:
            raise BadConfig(f"unsupported model version {version}")
        in_ch, base_width, variant_code = struct.unpack("<HHB", f.read(5))
        (n_scales,) = struct.unpack("<B", f.read(1))
        scales, scale_outputs = [], {}
        for _ in range(n_scales):
            (s,) = struct.unpack("<B", f.read(1))
            scales.append(s)
            scale_outputs[s] = _read_name(f)
        first_conv = _read_name(f)
        (n_layers,) = struct.unpack("<H", f.read(2))
        layers = []
        for _ in range(n_layers):
            (kind_code,) = struct.unpack("<B", f.read(1))
            gi = struct.unpack("<6H", f.read(12))
            k_w, k_a = struct.unpack("<BB", f.read(2))
            name = _read_name(f)
            (n_in,) = struct.unpack("<B", f.read(1))
            inputs = [_read_name(f) for _ in range(n_in)]
            kind = _KIND_FROM_CODE[kind_code]
            geom = None
            if kind in (KIND_CONV, KIND_RESIDUAL, KIND_HEAD):
                geom = ConvGeom(*gi)
            layers.append(LayerSpec(name, kind, inputs, geom, QuantSpec(k_w, k_a)))
        net = SegNet(layers, num_classes, scales, scale_outputs,
                     VARIANTS[variant_code], base_width, in_ch, first_conv)
        net.params = _read_tensor_section(f)
        net.buffers = _read_tensor_section(f)
        velocity = _read_tensor_section(f)
    return net, (velocity or None)
