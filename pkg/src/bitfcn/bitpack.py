"""Bit-plane packed tensors and the popcount dot-product kernels under everything else.

Layout contract:
- Elements are flattened in row-major (N, C, H, W) order.
- Bit p of the flat stream lives in 64-bit word p // 64 at bit position
  p % 64 (little-endian bit order within each word).
- Bits at positions >= len are forced to zero when a plane is built, so
  popcount kernels never have to mask tails per call.

A k-bit unsigned code tensor is stored as k such planes, plane i holding
bit i of every element's code.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import BadBitWidth, CodeOverflow, LengthMismatch, ShapeMismatch

WORD_BITS = 64
BTSR_MAGIC = b"BTSR"
BTSR_VERSION = 1
# k field value marking a raw float32 payload instead of packed planes.
BTSR_FLOAT_SENTINEL = 255


def _check_bit_width(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= int(k) <= 8:
        raise BadBitWidth(f"bit-width must be an integer in [1, 8], got {k!r}")


def _n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def _mask_tail(words: np.ndarray, length: int) -> np.ndarray:
    """Zero all bits at positions >= length, in place."""
    rem = length % WORD_BITS
    if rem and words.size:
        words[-1] &= np.uint64((1 << rem) - 1)
    return words


def _pack_bit_rows(rows: np.ndarray) -> np.ndarray:
    """Pack a (n, taps) array of {0,1} into (n, ceil(taps/64)) uint64 words."""
    n, taps = rows.shape
    words = _n_words(taps)
    packed = np.packbits(rows, axis=1, bitorder="little")
    want = words * 8
    if packed.shape[1] != want:
        pad = np.zeros((n, want - packed.shape[1]), dtype=np.uint8)
        packed = np.concatenate([packed, pad], axis=1)
    return np.ascontiguousarray(packed).view(np.uint64)


def popcount_words(words: np.ndarray) -> int:
    """Total number of set bits in a uint64 array."""
    return int(np.bitwise_count(words).sum(dtype=np.int64))


class BitPlane:
    """A fixed-length bit vector packed 64 bits per word, tail zeroed."""

    __slots__ = ("len", "words")

    def __init__(self, length: int, words: np.ndarray):
        length = int(length)
        words = np.array(words, dtype=np.uint64, copy=True).reshape(-1)
        if words.shape[0] != _n_words(length):
            raise LengthMismatch(
                f"{words.shape[0]} words cannot hold exactly {length} bits"
            )
        self.len = length
        self.words = _mask_tail(words, length)

    @classmethod
    def from_bits(cls, bits: Union[np.ndarray, Sequence[int]]) -> "BitPlane":
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        if bits.size and bits.max() > 1:
            raise CodeOverflow("bit values must be 0 or 1")
        plane = cls.__new__(cls)
        plane.len = int(bits.size)
        plane.words = _pack_bit_rows(bits[None, :])[0] if bits.size else np.zeros(0, np.uint64)
        return plane

    @classmethod
    def zeros(cls, length: int) -> "BitPlane":
        plane = cls.__new__(cls)
        plane.len = int(length)
        plane.words = np.zeros(_n_words(length), dtype=np.uint64)
        return plane

    @classmethod
    def ones(cls, length: int) -> "BitPlane":
        plane = cls.__new__(cls)
        plane.len = int(length)
        plane.words = _mask_tail(np.full(_n_words(length), np.uint64(2**64 - 1)), length)
        return plane

    def to_bits(self) -> np.ndarray:
        """Unpack to a uint8 {0,1} array of length len."""
        if self.len == 0:
            return np.zeros(0, dtype=np.uint8)
        raw = np.unpackbits(self.words.view(np.uint8), bitorder="little")
        return raw[: self.len]

    def _check_same_len(self, other: "BitPlane") -> None:
        if self.len != other.len:
            raise LengthMismatch(f"plane lengths differ: {self.len} vs {other.len}")

    def xor(self, other: "BitPlane") -> "BitPlane":
        self._check_same_len(other)
        out = BitPlane.__new__(BitPlane)
        out.len = self.len
        out.words = self.words ^ other.words
        return out

    def xnor(self, other: "BitPlane") -> "BitPlane":
        self._check_same_len(other)
        out = BitPlane.__new__(BitPlane)
        out.len = self.len
        out.words = _mask_tail(~(self.words ^ other.words), self.len)
        return out

    def and_(self, other: "BitPlane") -> "BitPlane":
        self._check_same_len(other)
        out = BitPlane.__new__(BitPlane)
        out.len = self.len
        out.words = self.words & other.words
        return out

    def complement(self) -> "BitPlane":
        out = BitPlane.__new__(BitPlane)
        out.len = self.len
        out.words = _mask_tail(~self.words, self.len)
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BitPlane)
            and self.len == other.len
            and bool(np.array_equal(self.words, other.words))
        )

    def __repr__(self) -> str:
        return f"BitPlane(len={self.len}, popcount={plane_popcount(self)})"


class BitPlaneTensor:
    """k bit planes over a common element ordering, one plane per code bit."""

    __slots__ = ("shape", "k", "planes")

    def __init__(self, shape: Sequence[int], k: int, planes: Sequence[BitPlane]):
        _check_bit_width(k)
        self.shape = tuple(int(s) for s in shape)
        self.k = int(k)
        numel = int(np.prod(self.shape)) if self.shape else 0
        if len(planes) != self.k:
            raise BadBitWidth(f"expected {self.k} planes, got {len(planes)}")
        for p in planes:
            if p.len != numel:
                raise LengthMismatch(
                    f"plane length {p.len} != element count {numel}"
                )
        self.planes = list(planes)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0


def pack(codes, k: int) -> BitPlaneTensor:
    """Pack an unsigned code tensor into k bit planes.

    Plane i, bit position p, equals bit i of codes.flat[p].
    """
    _check_bit_width(k)
    arr = np.asarray(codes)
    if not (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.bool_)):
        raise CodeOverflow(f"codes must be integers, got dtype {arr.dtype}")
    if arr.size and (int(arr.min()) < 0 or int(arr.max()) >= (1 << k)):
        raise CodeOverflow(f"codes must lie in [0, 2^{k} - 1]")
    flat = arr.astype(np.uint8).reshape(-1)
    planes = [BitPlane.from_bits((flat >> i) & 1) for i in range(k)]
    return BitPlaneTensor(arr.shape, k, planes)


def unpack(t: BitPlaneTensor) -> np.ndarray:
    """Reconstruct the unsigned code tensor: codes[p] = sum_i 2^i * plane_i[p]."""
    out = np.zeros(t.numel, dtype=np.uint8)
    for i, plane in enumerate(t.planes):
        out |= plane.to_bits() << i
    return out.reshape(t.shape)


def bit_dot_signed(x: BitPlane, y: BitPlane) -> int:
    """Dot product over {-1,+1} values encoded as {0,1} bits.

    Equals n - 2*popcount(xor(x, y)): positions that agree contribute +1,
    positions that differ contribute -1.
    """
    x._check_same_len(y)
    return x.len - 2 * popcount_words(x.words ^ y.words)


def bit_dot_unsigned(x: BitPlane, y: BitPlane) -> int:
    """Dot product over {0,1} values: popcount(and(x, y))."""
    x._check_same_len(y)
    return popcount_words(x.words & y.words)


def plane_popcount(x: BitPlane) -> int:
    """Number of set bits among the first len positions."""
    return popcount_words(x.words)


# ---------------------------------------------------------------------------
# BTSR container: magic "BTSR", u8 version, u8 k, u32 x4 shape (N, C, H, W),
# then either k planes of ceil(numel/64) little-endian u64 words each, or,
# when k == 255, numel little-endian float32 values.
# ---------------------------------------------------------------------------


def write_btsr(f: BinaryIO, obj: Union[BitPlaneTensor, np.ndarray]) -> None:
    """Serialize a BitPlaneTensor, or a 4-D float32 array via the k=255 sentinel."""
    if isinstance(obj, BitPlaneTensor):
        if len(obj.shape) != 4:
            raise ShapeMismatch("BTSR stores 4-D (N, C, H, W) tensors")
        f.write(BTSR_MAGIC)
        f.write(struct.pack("<BB", BTSR_VERSION, obj.k))
        f.write(struct.pack("<4I", *obj.shape))
        for plane in obj.planes:
            f.write(plane.words.astype("<u8").tobytes())
    else:
        arr = np.asarray(obj, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeMismatch("BTSR stores 4-D (N, C, H, W) tensors")
        f.write(BTSR_MAGIC)
        f.write(struct.pack("<BB", BTSR_VERSION, BTSR_FLOAT_SENTINEL))
        f.write(struct.pack("<4I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_btsr(f: BinaryIO) -> Union[BitPlaneTensor, np.ndarray]:
    """Inverse of write_btsr. Returns a BitPlaneTensor or a float32 array."""
    magic = f.read(4)
    if magic != BTSR_MAGIC:
        raise ShapeMismatch(f"bad BTSR magic {magic!r}")
    version, k = struct.unpack("<BB", f.read(2))
    if version != BTSR_VERSION:
        raise ShapeMismatch(f"unsupported BTSR version {version}")
    shape = struct.unpack("<4I", f.read(16))
    numel = int(np.prod(shape))
    if k == BTSR_FLOAT_SENTINEL:
        raw = f.read(4 * numel)
        arr = np.frombuffer(raw, dtype="<f4", count=numel).astype(np.float32)
        return arr.reshape(shape)
    _check_bit_width(k)
    words = _n_words(numel)
    planes = []
    for _ in range(k):
        raw = f.read(8 * words)
        w = np.frombuffer(raw, dtype="<u8", count=words).astype(np.uint64)
        planes.append(BitPlane(numel, w))
    return BitPlaneTensor(shape, k, planes)
