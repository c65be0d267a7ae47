"""SGD with momentum, training routes, bit-width decay, class weighting,
and the bit allocation analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import graph
from .dataset import ConfusionMatrix, SegSample, accumulate_confusion, mean_iou, per_class_iou
from .errors import (
    BadConfig,
    BadConstant,
    BadSchedule,
    DivergenceDetected,
    MissingAsset,
    ShapeMismatch,
)
from .graph import SegNet, backward, build_toy_bfcn, forward, predict
from .quantize import FULL_PRECISION, QuantSpec

ROUTES = ("p1", "p2", "p1-8bit")
DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True)
class DecaySchedule:
    """Stepwise bit-width reduction: c, c-r, c-2r, ..., clamped to target."""

    c: int = 8
    r: int = 1
    target: int = 2
    fine_tune_iters: int = 100

    def __post_init__(self):
        if self.target > self.c:
            raise BadSchedule(f"target {self.target} exceeds initial bit-width {self.c}")
        if self.target < 1 or self.r < 1:
            raise BadSchedule(f"need target >= 1 and rate >= 1: {self}")


def decay_sequence(sched: DecaySchedule) -> list[int]:
    """Bit-widths visited by the schedule, ending exactly at the target."""
    ks = []
    k = sched.c
    while k > sched.target:
        ks.append(k)
        k -= sched.r
    ks.append(sched.target)
    return ks


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 8
    iters: int = 600
    route: str = "p1"
    stage_schedule: list[int] | None = None  # start iteration per scale, coarse to fine
    class_weight_c: float = 1.4

    def __post_init__(self):
        if self.lr <= 0:
            raise BadConfig(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise BadConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.route not in ROUTES:
            raise BadConfig(f"route must be one of {ROUTES}, got {self.route!r}")


@dataclass
class SplitData:
    train: list
    val: list


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float,
                      momentum: float):
    """v <- momentum*v + grad; p <- p - lr*v. Updates in place and returns both."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} != param {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            velocity[name] = v
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def class_weights(pixel_freqs, c: float) -> np.ndarray:
    """Inverse-log frequency weights: W = 1 / ln(c + p)."""
    if c <= 1.0:
        raise BadConstant(f"weighting constant must exceed 1, got {c}")
    p = np.asarray(pixel_freqs, dtype=np.float64)
    return 1.0 / np.log(c + p)


def allocation_error(k_w: int, k_a: int) -> float:
    """Accumulated multiplication error model: 1/2^k_w + 1/2^k_a."""
    if k_w < 1 or k_a < 1:
        raise BadConfig("bit-widths must be >= 1")
    return 1.0 / (1 << int(k_w)) + 1.0 / (1 << int(k_a))


def optimal_allocation(budget: int) -> tuple[int, int]:
    """Integer (k_w, k_a) minimizing the error model subject to k_w*k_a <= budget.

    Ties break toward k_w == k_a, then toward larger k_a.
    """
    if budget < 1:
        raise BadConfig(f"budget must be >= 1, got {budget}")
    best = None
    for k_w in range(1, budget + 1):
        for k_a in range(1, budget // k_w + 1):
            err = allocation_error(k_w, k_a)
            key = (err, k_w != k_a, -k_a)
            if best is None or key < best[0]:
                best = (key, (k_w, k_a))
    return best[1]


def class_pixel_freqs(samples: list[SegSample], num_classes: int) -> np.ndarray:
    """Fraction of labeled pixels per class over a sample list."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        lab = s.labels[s.labels != graph.IGNORE_LABEL]
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def evaluate_miou(net: SegNet, samples: list[SegSample], mode: str = "bit",
                  batch: int = 16):
    """Returns (mean_iou, per_class_iou, confusion) on full-resolution labels."""
    cm = ConfusionMatrix(net.num_classes)
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.labels for s in chunk])
        pred = predict(net, images, mode=mode)
        accumulate_confusion(pred, labels, cm)
    return mean_iou(cm), per_class_iou(cm), cm


@dataclass
class StageMetrics:
    name: str
    k_w: int
    k_a: int
    iters: int
    final_loss: float
    val_miou: float | None


@dataclass
class TrainResult:
    net: SegNet
    stages: list[StageMetrics]
    log_lines: list[str]
    velocity: dict


def _batch_arrays(samples, idx):
    images = np.stack([samples[i].image for i in idx])
    labels = np.stack([samples[i].labels for i in idx])
    return images, labels


def train_steps(net: SegNet, samples, *, iters: int, lr: float, momentum: float,
                batch: int, weights, rng, velocity: dict, log: list,
                active_scales_for=None, mode: str = "bit", bit_label: str = "32",
                augment_reflect: bool = False) -> float:
    """Inner SGD loop. Logs one tab-separated line per iteration:
    iter, active bit-width, active scales, loss, lr. Raises DivergenceDetected
    after DIVERGENCE_PATIENCE consecutive non-finite losses."""
    last_loss = math.nan
    bad_streak = 0
    for it in range(iters):
        idx = rng.integers(0, len(samples), size=batch)
        images, labels = _batch_arrays(samples, idx)
        if augment_reflect and rng.random() < 0.5:
            images = images[:, :, :, ::-1].copy()
            labels = labels[:, :, ::-1].copy()
        scales = (active_scales_for(it) if active_scales_for is not None
                  else list(net.scales))
        loss, grads, _ = backward(net, images, labels, scales, weights, mode=mode)
        sgd_momentum_step(net.params, grads, velocity, lr, momentum)
        log.append(f"{it}\t{bit_label}\t{','.join(str(s) for s in scales)}\t{loss:.6f}\t{lr}")
        last_loss = loss
        if math.isfinite(loss):
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= DIVERGENCE_PATIENCE:
                raise DivergenceDetected(
                    f"loss non-finite for {bad_streak} consecutive iterations"
                )
    return last_loss


def _staged_scales(net: SegNet, total_iters: int, stage_schedule=None):
    """Coarse-to-fine loss activation: scale i joins at its scheduled iteration
    (default: equal splits of the budget)."""
    scales = sorted(net.scales, reverse=True)  # coarse first
    if stage_schedule is None:
        step = max(1, total_iters // len(scales))
        starts = [i * step for i in range(len(scales))]
    else:
        if len(stage_schedule) != len(scales):
            raise BadConfig("stage_schedule needs one start iteration per scale")
        starts = list(stage_schedule)

    def active(it):
        act = [s for s, start in zip(scales, starts) if it >= start]
        return act if act else [scales[0]]

    return active


def default_fine_tune_iters(n_train: int, batch: int, passes: int = 3) -> int:
    """Enough iterations for each decay step to see the train split >= `passes` times."""
    return max(1, math.ceil(passes * n_train / batch))


def run_bit_width_decay(net: SegNet, sched: DecaySchedule, data: SplitData,
                        cfg: TrainConfig, *, weights=None, rng=None,
                        velocity=None, log=None, mode: str = "bit"):
    """Stepwise quantization of a full-precision-pretrained net: for each
    bit-width in the schedule, point every non-first layer at it and fine-tune.

    Returns (net, [StageMetrics per step])."""
    weights = np.ones(net.num_classes) if weights is None else weights
    rng = np.random.default_rng(0) if rng is None else rng
    velocity = {} if velocity is None else velocity
    log = [] if log is None else log
    metrics = []
    for k in decay_sequence(sched):
        net.set_bit_width(k, k)
        loss = train_steps(
            net, data.train, iters=sched.fine_tune_iters, lr=cfg.lr,
            momentum=cfg.momentum, batch=cfg.batch, weights=weights, rng=rng,
            velocity=velocity, log=log, mode=mode, bit_label=f"{k}-{k}",
        )
        miou, _, _ = evaluate_miou(net, data.val, mode=mode) if data.val else (None, None, None)
        metrics.append(StageMetrics(f"decay-{k}", k, k, sched.fine_tune_iters, loss, miou))
    return net, metrics


def init_route(route: str, assets: dict) -> SegNet:
    """Produce a net ready for low bit-width fine-tuning.

    p1:      full-precision net, pretrained on the task.
    p1-8bit: p1 plus an 8-bit intermediate fine-tune.
    p2:      net trained from scratch directly at the target bit-width
             (the low bit-width initialization; no full-precision stage).
    Required assets: data (SplitData), cfg (TrainConfig), build (kwargs for
    build_toy_bfcn minus quant), target (k_w, k_a), pretrain_iters, and
    the shared mutable training state (weights, rng, velocity, log).
    """
    if route not in ROUTES:
        raise BadConfig(f"route must be one of {ROUTES}, got {route!r}")
    for key in ("data", "cfg", "build", "target", "pretrain_iters"):
        if key not in assets:
            raise MissingAsset(f"route {route} requires asset {key!r}")
    data: SplitData = assets["data"]
    cfg: TrainConfig = assets["cfg"]
    k_w, k_a = assets["target"]
    pretrain_iters = assets["pretrain_iters"]
    weights = assets.get("weights")
    if weights is None:
        weights = np.ones(assets["build"]["num_classes"])
    rng = assets.get("rng") or np.random.default_rng(0)
    velocity = assets.setdefault("velocity", {})
    log = assets.setdefault("log", [])
    mode = assets.get("mode", "bit")

    if route == "p2":
        net = build_toy_bfcn(quant=QuantSpec(k_w, k_a), **assets["build"])
        train_steps(net, data.train, iters=pretrain_iters, lr=cfg.lr,
                    momentum=cfg.momentum, batch=cfg.batch, weights=weights,
                    rng=rng, velocity=velocity, log=log,
                    active_scales_for=_staged_scales(net, pretrain_iters, cfg.stage_schedule),
                    mode=mode, bit_label=f"{k_w}-{k_a}")
        return net

    net = build_toy_bfcn(quant=QuantSpec(FULL_PRECISION, FULL_PRECISION), **assets["build"])
    train_steps(net, data.train, iters=pretrain_iters, lr=cfg.lr,
                momentum=cfg.momentum, batch=cfg.batch, weights=weights,
                rng=rng, velocity=velocity, log=log,
                active_scales_for=_staged_scales(net, pretrain_iters, cfg.stage_schedule),
                mode=mode, bit_label="32-32")
    if route == "p1-8bit":
        stage_iters = assets.get("stage_iters", pretrain_iters)
        net.set_bit_width(8, 8)
        train_steps(net, data.train, iters=stage_iters, lr=cfg.lr,
                    momentum=cfg.momentum, batch=cfg.batch, weights=weights,
                    rng=rng, velocity=velocity, log=log, mode=mode, bit_label="8-8")
    return net


def train_bfcn(data: SplitData, *, k_w: int, k_a: int, variant: str,
               base_width: int, num_classes: int, in_ch: int = 3, seed: int = 0,
               cfg: TrainConfig | None = None, decay_rate: int | None = None,
               decay_step_iters: int | None = None, pretrain_iters: int | None = None,
               mode: str = "bit", eval_stages: bool = True) -> TrainResult:
    """End-to-end recipe: route initialization, optional bit-width decay,
    final fine-tune. The total budget cfg.iters is split across stages;
    pretrain_iters overrides the route's default split."""
    cfg = cfg or TrainConfig()
    if decay_rate is not None and cfg.route == "p2":
        raise BadConfig("bit-width decay requires a full-precision start (routes p1/p1-8bit)")
    ss = np.random.SeedSequence(seed)
    init_seed, order_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    rng = np.random.default_rng(order_seed)
    weights = class_weights(class_pixel_freqs(data.train, num_classes), cfg.class_weight_c)
    log: list[str] = []
    velocity: dict = {}
    stages: list[StageMetrics] = []
    build = dict(in_ch=in_ch, num_classes=num_classes, base_width=base_width,
                 variant=variant, init_seed=init_seed)

    def record(name, kw, ka, iters, loss):
        miou = evaluate_miou(net, data.val, mode=mode)[0] if (eval_stages and data.val) else None
        stages.append(StageMetrics(name, kw, ka, iters, loss, miou))

    full = k_w == FULL_PRECISION and k_a == FULL_PRECISION
    if full:
        net = build_toy_bfcn(quant=QuantSpec(FULL_PRECISION, FULL_PRECISION), **build)
        loss = train_steps(net, data.train, iters=cfg.iters, lr=cfg.lr,
                           momentum=cfg.momentum, batch=cfg.batch, weights=weights,
                           rng=rng, velocity=velocity, log=log,
                           active_scales_for=_staged_scales(net, cfg.iters, cfg.stage_schedule),
                           mode=mode, bit_label="32-32")
        record("full-precision", FULL_PRECISION, FULL_PRECISION, cfg.iters, loss)
        return TrainResult(net, stages, log, velocity)

    if cfg.route == "p2":
        pretrain = pretrain_iters if pretrain_iters is not None else cfg.iters
        finetune = 0
    elif decay_rate is not None:
        pretrain = pretrain_iters if pretrain_iters is not None else cfg.iters // 2
        finetune = cfg.iters - pretrain
    elif cfg.route == "p1-8bit":
        # half the budget stays at the target bit-width; the final precision
        # drop is where fine-tuning is needed most
        pretrain = pretrain_iters if pretrain_iters is not None else cfg.iters // 4
        finetune = cfg.iters - 2 * pretrain
    else:
        pretrain = pretrain_iters if pretrain_iters is not None else cfg.iters // 2
        finetune = cfg.iters - pretrain

    assets = dict(data=data, cfg=cfg, build=build, target=(k_w, k_a),
                  pretrain_iters=pretrain, weights=weights, rng=rng,
                  velocity=velocity, log=log, mode=mode,
                  stage_iters=pretrain)
    # with decay enabled the 8-bit stage is the schedule's first step, so the
    # route initialization stops at the full-precision net
    net = init_route("p1" if decay_rate is not None else cfg.route, assets)
    record(f"init-{cfg.route}", net.by_name[net.first_conv].quant.k_w,
           net.by_name[net.first_conv].quant.k_a, pretrain, math.nan)

    if cfg.route == "p2":
        return TrainResult(net, stages, log, velocity)

    if decay_rate is not None:
        if k_w != k_a:
            # decay both bit-widths together down to max(k_w, k_a), then set
            # the asymmetric target for the final fine-tune
            joint_target = max(k_w, k_a)
        else:
            joint_target = k_w
        steps = len(decay_sequence(DecaySchedule(8, decay_rate, joint_target, 1)))
        # the last precision drop is the hard one: intermediate steps share the
        # budget thinly and the target bit-width keeps the remainder
        per_step = decay_step_iters or max(1, finetune // (steps + 2))
        sched = DecaySchedule(8, decay_rate, joint_target, per_step)
        decay_data = data if eval_stages else SplitData(data.train, [])
        net, decay_metrics = run_bit_width_decay(
            net, sched, decay_data, cfg, weights=weights, rng=rng,
            velocity=velocity, log=log, mode=mode)
        stages.extend(decay_metrics)
        extra = finetune - per_step * steps
        if k_w != k_a:
            net.set_bit_width(k_w, k_a)
            extra = max(extra, per_step)
        if extra > 0:
            loss = train_steps(net, data.train, iters=extra, lr=cfg.lr,
                               momentum=cfg.momentum, batch=cfg.batch,
                               weights=weights, rng=rng, velocity=velocity,
                               log=log, mode=mode, bit_label=f"{k_w}-{k_a}")
            record(f"target-{k_w}-{k_a}", k_w, k_a, extra, loss)
        return TrainResult(net, stages, log, velocity)

    net.set_bit_width(k_w, k_a)
    loss = train_steps(net, data.train, iters=finetune, lr=cfg.lr,
                       momentum=cfg.momentum, batch=cfg.batch, weights=weights,
                       rng=rng, velocity=velocity, log=log, mode=mode,
                       bit_label=f"{k_w}-{k_a}")
    record(f"target-{k_w}-{k_a}", k_w, k_a, finetune, loss)
    return TrainResult(net, stages, log, velocity)
