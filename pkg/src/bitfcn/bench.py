"""Wall-clock benchmarking of the bit kernels against the float path, plus
the analytic bitOps cost and storage models."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .bitconv import KERNEL_INVOCATIONS, ConvGeom, bitconv2d, conv2d_im2col, kernel_count
from .bitpack import pack
from .errors import BadConfig
from .graph import SegNet
from .quantize import FULL_PRECISION


@dataclass(frozen=True)
class CostModel:
    """How many bitOps one 32-bit float operation is worth on a platform."""

    platform: str
    bitops_per_flop: float

    def __post_init__(self):
        if self.bitops_per_flop <= 0:
            raise BadConfig("bitops_per_flop must be positive")


CPU_COST_MODEL = CostModel("CPU", 18.0)
FPGA_COST_MODEL = CostModel("FPGA", 1024.0)


def predicted_speedup(k_w: int, k_a: int, model: CostModel) -> float:
    """Ideal speedup over the 32-bit path: bitops_per_flop / (k_w * k_a)."""
    if k_w < 1 or k_a < 1:
        raise BadConfig("bit-widths must be >= 1")
    return model.bitops_per_flop / (k_w * k_a)


def parameter_size(net: SegNet) -> int:
    """Stored model bytes: ceil(count * k_w / 8) per conv filter (k=32 counts
    as 32 bits) plus 4 bytes per BN/bias scalar."""
    total = 0
    conv_names = set()
    for name, geom, quant in net.conv_entries():
        conv_names.add(name)
        count = geom.out_ch * geom.in_ch * geom.kh * geom.kw
        bits = FULL_PRECISION if quant.k_w == FULL_PRECISION else quant.k_w
        total += (count * bits + 7) // 8
    for name, arr in net.params.items():
        if name not in conv_names:
            total += 4 * arr.size
    for arr in net.buffers.values():
        total += 4 * arr.size
    return total


@dataclass
class BenchRow:
    config: str
    median_ns: float
    speedup_vs_fp: float
    kernel_invocations: int
    predicted_speedup: float


@dataclass
class BenchReport:
    shape: tuple
    reps: int
    rows: list[BenchRow] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def row(self, config: str) -> BenchRow:
        for r in self.rows:
            if r.config == config:
                return r
        raise KeyError(config)

    def to_tsv(self) -> str:
        lines = ["config\tmedian_ns\tspeedup_vs_fp\tkernel_invocations\tpredicted_speedup"]
        for r in self.rows:
            lines.append(
                f"{r.config}\t{r.median_ns:.0f}\t{r.speedup_vs_fp:.3f}"
                f"\t{r.kernel_invocations}\t{r.predicted_speedup:.3f}"
            )
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        header = f"{'config':>8} {'median_ms':>12} {'vs_fp':>8} {'kernels':>8} {'ideal':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.config:>8} {r.median_ns / 1e6:>12.3f} {r.speedup_vs_fp:>8.2f}"
                f" {r.kernel_invocations:>8} {r.predicted_speedup:>8.2f}"
            )
        lines.extend(f"# {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def _pin_to_one_core() -> str:
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
        return f"pinned to logical core {min(cpus)}"
    except (AttributeError, OSError):
        return "core pinning unavailable on this platform"


def _median_time_ns(fn, reps: int, warmups: int = 3) -> float:
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def run_bench(shape, configs, reps: int = 20, seed: int = 0,
              model: CostModel = CPU_COST_MODEL, pin: bool = True) -> BenchReport:
    """Time bitconv2d per (k_w, k_a) config plus the float baseline on one
    shape. configs entries are (k_w, k_a) tuples or the string "fp"; the
    float baseline is always included. Single-threaded, 3 warmups, median
    of `reps` runs.
    """
    if reps < 1:
        raise BadConfig("reps must be >= 1")
    n, c, h, w = shape
    geom = ConvGeom(c, c, 3, 3, 1, 1)
    rng = np.random.default_rng(seed)
    report = BenchReport(tuple(shape), reps)
    if pin:
        report.notes.append(_pin_to_one_core())

    acts_f = rng.random((n, c, h, w))
    weights_f = rng.normal(0.0, 0.2, size=(c, c, 3, 3))
    fp_ns = _median_time_ns(lambda: conv2d_im2col(acts_f, weights_f, geom), reps)
    report.rows.append(BenchRow("fp", fp_ns, 1.0, 0, 1.0))

    for cfg in configs:
        if cfg == "fp":
            continue
        k_w, k_a = cfg
        acts = pack(rng.integers(0, 1 << k_a, size=(n, c, h, w)), k_a)
        weights = pack(rng.integers(0, 1 << k_w, size=(c, c, 3, 3)), k_w)
        ns = _median_time_ns(lambda: bitconv2d(acts, weights, geom), reps)
        KERNEL_INVOCATIONS.reset()
        bitconv2d(acts, weights, geom)
        invocations = KERNEL_INVOCATIONS.count
        report.rows.append(BenchRow(
            f"{k_w}x{k_a}", ns, fp_ns / ns, invocations,
            predicted_speedup(k_w, k_a, model),
        ))
    return report
