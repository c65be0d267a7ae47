"""m-bit x n-bit convolution out of m*n binary popcount kernels.

The lowering is im2col at the bit-plane level: every activation plane is
expanded into per-window bit rows packed 64 taps per word, every weight
plane into per-filter bit rows, and each (act plane i, weight plane j)
pair runs one binary kernel, popcount(and(window, filter)), whose counts
are accumulated with weight 2^(i+j). The accumulator is exact int64.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bitpack import BitPlaneTensor, _pack_bit_rows
from .errors import (
    AccumulatorOverflowRisk,
    BadConfig,
    BitWidthMismatch,
    ShapeMismatch,
)
from .quantize import QuantSpec

ACC_LIMIT = 1 << 62


@dataclass(frozen=True)
class ConvGeom:
    """Shape of a 2-D convolution: channels, kernel extent, stride, zero padding."""

    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kh, self.kw, self.stride) < 1:
            raise BadConfig(f"conv geometry fields must be positive: {self}")
        if self.pad < 0 or self.pad >= max(self.kh, self.kw):
            raise BadConfig(f"pad must satisfy 0 <= pad < max(kh, kw): {self}")

    @property
    def n_taps(self) -> int:
        return self.in_ch * self.kh * self.kw

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad - self.kh) // self.stride + 1
        ow = (w + 2 * self.pad - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"input {h}x{w} too small for {self}")
        return oh, ow


class InvocationCounter:
    """Counts binary-kernel passes; incremented once per plane pair per conv."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def count(self) -> int:
        return self._count


KERNEL_INVOCATIONS = InvocationCounter()


def kernel_count(k_w: int, k_a: int) -> int:
    """Binary kernels needed for a k_w-bit x k_a-bit convolution."""
    for k in (k_w, k_a):
        if not 1 <= int(k) <= 8:
            raise BitWidthMismatch(f"bit-width must be in [1, 8], got {k}")
    return int(k_w) * int(k_a)


def _check_conv_shapes(acts: BitPlaneTensor, weights: BitPlaneTensor, geom: ConvGeom):
    if len(acts.shape) != 4:
        raise ShapeMismatch(f"activations must be (N, C, H, W), got {acts.shape}")
    if len(weights.shape) != 4:
        raise ShapeMismatch(f"weights must be (O, I, kh, kw), got {weights.shape}")
    n, c, h, w = acts.shape
    o, i, kh, kw = weights.shape
    if c != geom.in_ch or i != geom.in_ch or o != geom.out_ch:
        raise ShapeMismatch(
            f"channel mismatch: acts C={c}, weights (O={o}, I={i}), geom {geom}"
        )
    if (kh, kw) != (geom.kh, geom.kw):
        raise ShapeMismatch(f"kernel extent mismatch: weights {kh}x{kw}, geom {geom}")
    for k in (acts.k, weights.k):
        if not 1 <= k <= 8:
            raise BitWidthMismatch(f"packed tensors must be 1..8 bits, got {k}")


def _check_overflow(geom: ConvGeom, k_a: int, k_w: int) -> None:
    bound = geom.n_taps * ((1 << k_a) - 1) * ((1 << k_w) - 1)
    if bound > ACC_LIMIT:
        raise AccumulatorOverflowRisk(
            f"worst-case accumulator {bound} exceeds 2^62 for {geom}"
        )


def _plane_window_words(plane_bits: np.ndarray, geom: ConvGeom):
    """Extract conv windows of one {0,1} plane and pack each row into words.

    plane_bits: (N, C, H, W) uint8. Returns (n_win, n_words) uint64 with
    n_win = N * H' * W' and rows ordered row-major over (N, H', W'); the
    taps within a row are ordered row-major over (C, kh, kw), matching the
    filter packing.
    """
    n, c, h, w = plane_bits.shape
    if geom.pad:
        p = geom.pad
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.uint8)
        padded[:, :, p : p + h, p : p + w] = plane_bits
    else:
        padded = plane_bits
    win = sliding_window_view(padded, (geom.kh, geom.kw), axis=(2, 3))
    win = win[:, :, :: geom.stride, :: geom.stride]
    # (N, C, H', W', kh, kw) -> (N, H', W', C, kh, kw)
    win = win.transpose(0, 2, 3, 1, 4, 5)
    oh, ow = win.shape[1], win.shape[2]
    rows = win.reshape(n * oh * ow, geom.n_taps)
    return _pack_bit_rows(rows), (oh, ow)


def _act_plane_windows(acts: BitPlaneTensor, geom: ConvGeom):
    packed = []
    out_hw = None
    for plane in acts.planes:
        bits = plane.to_bits().reshape(acts.shape)
        words, out_hw = _plane_window_words(bits, geom)
        packed.append(words)
    return packed, out_hw


def _weight_plane_words(weights: BitPlaneTensor) -> list[np.ndarray]:
    o = weights.shape[0]
    taps = int(np.prod(weights.shape[1:]))
    return [
        _pack_bit_rows(plane.to_bits().reshape(o, taps)) for plane in weights.planes
    ]


def _popcount_matmul(win_words: np.ndarray, filt_words: np.ndarray) -> np.ndarray:
    """popcount(and(window, filter)) summed over words: (n_win, O) int64."""
    return np.bitwise_count(win_words[:, None, :] & filt_words[None, :, :]).sum(
        axis=2, dtype=np.int64
    )


def bitconv2d_with_sums(acts: BitPlaneTensor, weights: BitPlaneTensor, geom: ConvGeom):
    """Run the full bit-plane convolution once, also returning the per-window
    activation code sums needed by dequantize_conv.

    Returns (acc, act_window_sums) with acc int64 (N, O, H', W') and
    act_window_sums int64 (N, 1, H', W').
    """
    _check_conv_shapes(acts, weights, geom)
    _check_overflow(geom, acts.k, weights.k)
    n = acts.shape[0]
    k_w = weights.k
    act_words, (oh, ow) = _act_plane_windows(acts, geom)
    # all weight planes stacked: one AND + popcount pass covers the k_w
    # binary kernels of an activation plane
    filt_stack = np.concatenate(_weight_plane_words(weights), axis=0)
    j_weights = (np.int64(1) << np.arange(k_w, dtype=np.int64))

    n_win = n * oh * ow
    acc = np.zeros((n_win, geom.out_ch), dtype=np.int64)
    sums = np.zeros(n_win, dtype=np.int64)
    for i, aw in enumerate(act_words):
        sums += np.bitwise_count(aw).sum(axis=1, dtype=np.int64) << i
        counts = _popcount_matmul(aw, filt_stack).reshape(n_win, k_w, geom.out_ch)
        acc += np.tensordot(j_weights, counts, axes=([0], [1])) << i
        KERNEL_INVOCATIONS.add(k_w)

    acc4 = acc.reshape(n, oh, ow, geom.out_ch).transpose(0, 3, 1, 2)
    sums4 = sums.reshape(n, 1, oh, ow)
    return acc4, sums4


def bitconv2d(acts: BitPlaneTensor, weights: BitPlaneTensor, geom: ConvGeom) -> np.ndarray:
    """Integer convolution of unsigned codes via m*n binary popcount kernels.

    Exactly equals the integer convolution of the unpacked code tensors.
    """
    acc, _ = bitconv2d_with_sums(acts, weights, geom)
    return acc


def window_code_sums(acts: BitPlaneTensor, geom: ConvGeom) -> np.ndarray:
    """Per-window sum of activation codes, int64 (N, 1, H', W')."""
    if len(acts.shape) != 4:
        raise ShapeMismatch(f"activations must be (N, C, H, W), got {acts.shape}")
    if acts.shape[1] != geom.in_ch:
        raise ShapeMismatch(f"acts C={acts.shape[1]} != geom in_ch={geom.in_ch}")
    n = acts.shape[0]
    act_words, (oh, ow) = _act_plane_windows(acts, geom)
    sums = np.zeros(n * oh * ow, dtype=np.int64)
    for i, aw in enumerate(act_words):
        sums += np.bitwise_count(aw).sum(axis=1, dtype=np.int64) << i
    return sums.reshape(n, 1, oh, ow)


def weight_code_sums(weights: BitPlaneTensor) -> np.ndarray:
    """Per-filter sum of weight codes, int64 (O,)."""
    o = weights.shape[0]
    taps = int(np.prod(weights.shape[1:]))
    sums = np.zeros(o, dtype=np.int64)
    for j, plane in enumerate(weights.planes):
        sums += plane.to_bits().reshape(o, taps).sum(axis=1, dtype=np.int64) << j
    return sums


def bitconv2d_signed(acts: BitPlaneTensor, weights: BitPlaneTensor, geom: ConvGeom) -> np.ndarray:
    """1-bit-weight path: weights are sign bits (+1 as 1, -1 as 0).

    Returns the signed integer map sum_taps (+/-1) * act_code, computed per
    activation plane as 2*popcount(and(w, a_i)) - popcount(a_i window).
    Equals 2*bitconv2d(acts, weights, geom) - window_code_sums(acts, geom).
    """
    if weights.k != 1:
        raise BitWidthMismatch(f"signed path requires 1-bit weights, got k={weights.k}")
    _check_conv_shapes(acts, weights, geom)
    n = acts.shape[0]
    act_words, (oh, ow) = _act_plane_windows(acts, geom)
    fw = _weight_plane_words(weights)[0]
    out = np.zeros((n * oh * ow, geom.out_ch), dtype=np.int64)
    for i, aw in enumerate(act_words):
        matched = _popcount_matmul(aw, fw)
        win_pop = np.bitwise_count(aw).sum(axis=1, dtype=np.int64)
        out += (2 * matched - win_pop[:, None]) << i
        KERNEL_INVOCATIONS.add(1)
    return out.reshape(n, oh, ow, geom.out_ch).transpose(0, 3, 1, 2)


def dequantize_conv(
    acc: np.ndarray,
    spec: QuantSpec,
    act_window_sums: np.ndarray,
    weight_code_sums: np.ndarray,
    n_taps: int,
) -> np.ndarray:
    """Map the integer accumulator to the real-valued convolution output.

    With a = a_scale * (ca - a_zero) and w = w_scale * cw - 1, the product
    sum expands to
        a_scale * (w_scale * acc - act_window_sums)
        - a_scale * a_zero * (w_scale * weight_code_sums - n_taps)
    The second line vanishes here because a_zero is fixed to 0; it is kept
    so the correction stays valid for any affine activation code.
    """
    acc = np.asarray(acc)
    sums = np.asarray(act_window_sums)
    wsums = np.asarray(weight_code_sums)
    if acc.ndim != 4 or sums.ndim != 4:
        raise ShapeMismatch("acc and act_window_sums must be 4-D maps")
    if sums.shape[0] != acc.shape[0] or sums.shape[2:] != acc.shape[2:]:
        raise ShapeMismatch(
            f"act_window_sums shape {sums.shape} incompatible with acc {acc.shape}"
        )
    if wsums.shape != (acc.shape[1],):
        raise ShapeMismatch(
            f"weight_code_sums shape {wsums.shape} != (out_ch={acc.shape[1]},)"
        )
    if not 1 <= spec.k_w <= 8 or not 1 <= spec.k_a <= 8:
        raise BitWidthMismatch(f"dequantize_conv needs packed bit-widths, got {spec}")
    # a_scale*(w_scale*acc - sums) factored so the bracket stays in exact
    # integer arithmetic; one float division is the only rounding step
    numer = 2 * acc.astype(np.int64) - spec.w_levels * sums.astype(np.int64)
    out = numer / (spec.a_levels * spec.w_levels)
    if spec.a_zero:
        corr = spec.a_zero * spec.a_scale * (spec.w_scale * wsums - float(n_taps))
        out = out - corr[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# Float convolution: a slow direct-loop oracle and the im2col production path.
# ---------------------------------------------------------------------------


def conv2d_reference(acts, weights, geom: ConvGeom, exact_sum: bool = False) -> np.ndarray:
    """Direct-loop float convolution; the correctness anchor.

    With exact_sum=True each output accumulates its tap products through
    math.fsum (exactly rounded), for ulp-level comparisons.
    """
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if acts.ndim != 4 or weights.ndim != 4:
        raise ShapeMismatch("acts must be (N, C, H, W) and weights (O, I, kh, kw)")
    n, c, h, w = acts.shape
    o, i, kh, kw = weights.shape
    if c != geom.in_ch or i != geom.in_ch or o != geom.out_ch or (kh, kw) != (geom.kh, geom.kw):
        raise ShapeMismatch(f"shape mismatch: acts {acts.shape}, weights {weights.shape}, {geom}")
    oh, ow = geom.out_hw(h, w)
    p, s = geom.pad, geom.stride
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    padded[:, :, p : p + h, p : p + w] = acts
    out = np.empty((n, o, oh, ow), dtype=np.float64)
    for b in range(n):
        for f in range(o):
            for y in range(oh):
                for x in range(ow):
                    window = padded[b, :, y * s : y * s + kh, x * s : x * s + kw]
                    prods = window * weights[f]
                    if exact_sum:
                        out[b, f, y, x] = math.fsum(prods.reshape(-1).tolist())
                    else:
                        out[b, f, y, x] = prods.sum()
    return out


def im2col(acts: np.ndarray, geom: ConvGeom):
    """Float window extraction: ((N*H'*W', n_taps), (H', W')), rows ordered
    like the bit path."""
    n, c, h, w = acts.shape
    p, s = geom.pad, geom.stride
    if p:
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=acts.dtype)
        padded[:, :, p : p + h, p : p + w] = acts
    else:
        padded = acts
    win = sliding_window_view(padded, (geom.kh, geom.kw), axis=(2, 3))[:, :, ::s, ::s]
    win = win.transpose(0, 2, 3, 1, 4, 5)
    oh, ow = win.shape[1], win.shape[2]
    return win.reshape(n * oh * ow, geom.n_taps), (oh, ow)


def col2im(cols: np.ndarray, in_shape, geom: ConvGeom) -> np.ndarray:
    """Scatter-add the inverse of im2col; used by conv backward."""
    n, c, h, w = in_shape
    p, s = geom.pad, geom.stride
    oh = (h + 2 * p - geom.kh) // s + 1
    ow = (w + 2 * p - geom.kw) // s + 1
    cols6 = cols.reshape(n, oh, ow, c, geom.kh, geom.kw)
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    for dy in range(geom.kh):
        for dx in range(geom.kw):
            padded[:, :, dy : dy + s * oh : s, dx : dx + s * ow : s] += cols6[
                :, :, :, :, dy, dx
            ].transpose(0, 3, 1, 2)
    if p:
        return padded[:, :, p : p + h, p : p + w]
    return padded


def conv2d_im2col(acts, weights, geom: ConvGeom) -> np.ndarray:
    """Production float convolution: im2col + matmul. Matches conv2d_reference."""
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = acts.shape[0]
    cols, (oh, ow) = im2col(acts, geom)
    w_mat = weights.reshape(geom.out_ch, geom.n_taps)
    out = cols @ w_mat.T
    return out.reshape(n, oh, ow, geom.out_ch).transpose(0, 3, 1, 2)
