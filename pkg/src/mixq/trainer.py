"""Calibration and quantization-aware training loops."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .data import ToyDataset
from .distill import DistillConfig, distill_losses, loss_final
from .errors import ContractError, TrainingDiverged
from .model import (
    ACT_NAMES,
    PRECISION_BITS,
    WEIGHT_NAMES,
    EncoderConfig,
    EncoderParams,
    LayerBitConfig,
    QuantScales,
    act_key,
    backward,
    forward,
    weight_key,
)
from .quant import CalibStats, calibrate_activation, calibrate_weight

log = logging.getLogger(__name__)

# learning-rate grids searched in the reference setup, kept for sweeps
FINETUNE_LR_GRID = (1e-5, 3e-5, 5e-5)
QAT_WEIGHT_LR_GRID = (5e-6, 1e-5, 5e-5)
ACT_SCALE_LR_GRID = (0.05, 0.01)
WEIGHT_SCALE_LR_GRID = (0.005, 0.001)


@dataclass
class TrainConfig:
    lr_weight: float = 1e-5
    lr_act_scale: float = 0.01
    lr_weight_scale: float = 0.001
    warmup_fraction: float = 0.10
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    grad_mode: str = "MSE"
    learn_scales: bool = True
    # multiply each scale's learning rate by its calibrated value, so rates are per-step relative changes
    scale_lr_relative: bool = False
    n_int4: int = 2
    bit_plan: list | None = None
    calib_steps: int = 200
    calib_batch_size: int = 32
    calib_literal_max: bool = False
    finetune_lr: float = 1e-3
    finetune_epochs: int = 5
    weight_decay: float = 0.0
    grad_clip: float | None = None
    eval_every: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if not 0 <= self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in [0, 1)")
        if min(self.lr_weight, self.lr_act_scale, self.lr_weight_scale, self.finetune_lr) < 0:
            raise ContractError("learning rates must be non-negative")
        if self.grad_mode not in ("STE", "MSE"):
            raise ContractError(f"grad_mode must be STE or MSE, got {self.grad_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")

    def plan_for(self, n_layers: int) -> LayerBitConfig:
        if self.bit_plan is not None:
            if len(self.bit_plan) != n_layers:
                raise ContractError(f"bit_plan has {len(self.bit_plan)} entries for {n_layers} layers")
            return LayerBitConfig(list(self.bit_plan))
        return build_bit_plan(n_layers, self.n_int4)

    def to_dict(self) -> dict:
        return asdict(self)


# -- schedule / plan / accounting ----------------------------------------------------

def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup from 0 to base_lr, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


def build_bit_plan(n_layers: int, n_int4: int) -> LayerBitConfig:
    """The last ``n_int4`` layers in int4, the rest int8."""
    if not 0 <= n_int4 <= n_layers:
        raise ContractError(f"n_int4={n_int4} must lie in [0, {n_layers}]")
    return LayerBitConfig(["int8"] * (n_layers - n_int4) + ["int4"] * n_int4)


def layer_gemm_weights(cfg: EncoderConfig) -> int:
    return 4 * cfg.hidden * cfg.hidden + 2 * cfg.hidden * cfg.intermediate


def compression_ratio(plan: LayerBitConfig, cfg: EncoderConfig) -> float:
    """Float32 bits over plan bits, summed over the encoder's GEMM weights."""
    if len(plan.layers) != cfg.layers:
        raise ContractError("plan length does not match the model depth")
    n = layer_gemm_weights(cfg)
    dense = 32 * n * cfg.layers
    packed = sum(PRECISION_BITS[p] * n for p in plan.layers)
    return dense / packed if packed else 1.0


# -- optimizer ----------------------------------------------------------------------

class Adam:
    """Adam with separate learning rates per named group; state kept as float32 arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, updates: Iterable[tuple[str, np.ndarray, np.ndarray, float, bool]]) -> None:
        """Apply one step. ``updates`` yields (key, param, grad, lr, decay) and params change in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, p, g, lr, decay in updates:
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if np.isscalar(lr) and lr == 0.0:
                continue
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay and self.weight_decay:
                upd = upd + self.weight_decay * p
            p -= (lr * upd).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int, **kw) -> "Adam":
        opt = cls(**kw)
        opt.t = t
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                opt.m[k[len("adam.m."):]] = v
            elif k.startswith("adam.v."):
                opt.v[k[len("adam.v."):]] = v
        return opt


def make_optimizer(cfg: TrainConfig) -> Adam:
    return Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)


# -- calibration ------------------------------------------------------------------------

def run_calibration(
    params: EncoderParams,
    model_cfg: EncoderConfig,
    plan: LayerBitConfig,
    data: ToyDataset,
    calib_steps: int = 200,
    batch_size: int = 32,
    grad_mode: str = "MSE",
    literal_max: bool = False,
    seed: int = 0,
) -> tuple[QuantScales, list[dict]]:
    """Initial scales for every quantized GEMM of ``plan``.

    Weights use per-row max-abs; activations use the 99.99th percentile of
    |x| collected from a float forward over ``calib_steps`` batches. Returns
    (scales, warning_records).
    """
    warnings: list[dict] = []
    stats = {}
    for i in range(model_cfg.layers):
        if plan.is_quantized(i):
            for j, a in enumerate(ACT_NAMES):
                stats[(i, a)] = CalibStats(seed=seed + 1000 * i + j)
    float_plan = LayerBitConfig.float32(model_cfg.layers)
    steps = 0
    if stats:
        for batch in data.batches(batch_size):
            if steps >= calib_steps:
                break
            _, trace = forward(batch.tokens, params, model_cfg, float_plan, mask=batch.mask, capture=True)
            m = batch.mask
            for i, c in enumerate(trace.caches["layers"]):
                if not plan.is_quantized(i):
                    continue
                inputs = {"attn_in": c["attn"][0][0], "ctx": c["o"][0], "ffn_in": c["f1"][0], "ffn_mid": c["f2"][0]}
                for a, x in inputs.items():
                    stats[(i, a)].update(x[m])
            steps += 1
        if steps < calib_steps:
            rec = {"event": "calibration_short", "requested_steps": calib_steps, "used_steps": steps}
            log.warning("calibration used %d of %d requested steps", steps, calib_steps)
            warnings.append(rec)

    qs: QuantScales = {}
    for i in range(model_cfg.layers):
        if not plan.is_quantized(i):
            continue
        bits = plan.bits(i)
        for w in WEIGHT_NAMES:
            qs[weight_key(i, w)] = calibrate_weight(params[weight_key(i, w)], bits, "row", grad_mode, literal_max)
        for a in ACT_NAMES:
            qs[act_key(i, a)] = calibrate_activation(stats[(i, a)], bits, grad_mode)
    return qs, warnings


# -- training -----------------------------------------------------------------------

@dataclass
class Teacher:
    params: EncoderParams
    cfg: EncoderConfig

    def __post_init__(self):
        self.plan = LayerBitConfig.float32(self.cfg.layers)


def _decays(name: str) -> bool:
    # biases and layernorm parameters are excluded from weight decay
    return not (name.endswith(("_g", "_b")) or ".b" in name)


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))


def train_step(
    params: EncoderParams,
    qs_set: QuantScales | None,
    batch: ToyDataset,
    opt: Adam,
    model_cfg: EncoderConfig,
    plan: LayerBitConfig,
    cfg: TrainConfig,
    lrs: dict[str, float],
    teacher: Teacher | None = None,
    distill: DistillConfig | None = None,
    step: int = 0,
    scale_refs: dict[str, np.ndarray] | None = None,
) -> dict:
    """One optimization step; params and scales are updated in place.

    ``lrs`` holds the already-scheduled rates for groups ``weight``,
    ``activation_scale`` and ``weight_scale``. With ``scale_refs`` each scale's
    rate is multiplied by its reference value. Returns the loss components.
    """
    logits, trace = forward(batch.tokens, params, model_cfg, plan, qs_set, mask=batch.mask, capture=True)
    task_loss, logits_grad = T.cross_entropy(logits, batch.labels)
    comps = {"output": 0.0, "attention": 0.0, "value": 0.0}

    def abort():
        record = {"event": "nan_abort", "step": step, "task": task_loss, **comps, "lr": dict(lrs)}
        raise TrainingDiverged(f"non-finite loss at step {step}", record)

    # checked before distillation, whose input contracts reject non-finite distributions
    if not math.isfinite(task_loss):
        abort()
    feature_grads: dict = {}
    if teacher is not None and distill is not None and distill.active:
        _, t_trace = forward(batch.tokens, teacher.params, teacher.cfg, teacher.plan, mask=batch.mask, capture=True)
        t_trace.caches = {}
        comps, dgrads = distill_losses(trace, t_trace, distill)
        if "logits" in dgrads:
            logits_grad = logits_grad + dgrads.pop("logits")
        feature_grads = dgrads
    dcfg = distill or DistillConfig(alpha=0.0, beta=0.0)
    if not all(math.isfinite(x) for x in comps.values()):
        abort()
    total = loss_final(task_loss, comps["output"], comps["attention"], comps["value"], dcfg)

    grads, sgrads = backward(logits_grad, trace, params, model_cfg, feature_grads)
    if cfg.grad_clip:
        norm = _global_norm(grads)
        if norm > cfg.grad_clip:
            f = np.float32(cfg.grad_clip / norm)
            grads = {k: g * f.astype(g.dtype) for k, g in grads.items()}

    updates = [(f"param.{k}", params[k], grads[k], lrs["weight"], _decays(k)) for k in params]
    if cfg.learn_scales and qs_set:
        for k, g in sgrads.items():
            qs = qs_set[k]
            lr = lrs[qs.lr_group]
            if scale_refs is not None:
                lr = lr * scale_refs[k]
            updates.append((f"scale.{k}", qs.s, np.asarray(g, dtype=qs.s.dtype), lr, False))
    opt.step(updates)
    if qs_set:
        for qs in qs_set.values():
            qs.clamp_positive()
    return {"loss": total, "task": task_loss, **comps}


def predict(params, model_cfg, data: ToyDataset, plan=None, qs_set=None, batch_size: int = 256) -> np.ndarray:
    out = []
    for batch in data.batches(batch_size):
        logits, _ = forward(batch.tokens, params, model_cfg, plan, qs_set, mask=batch.mask)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params, model_cfg, data: ToyDataset, plan=None, qs_set=None) -> float:
    if len(data) == 0:
        return float("nan")
    return float((predict(params, model_cfg, data, plan, qs_set) == data.labels).mean())


MetricsSink = Callable[[dict], None]


def _lrs(step, total, cfg: TrainConfig, weight_lr: float) -> dict[str, float]:
    f = lambda base: lr_schedule(step, total, base, cfg.warmup_fraction)  # noqa: E731
    return {"weight": f(weight_lr), "activation_scale": f(cfg.lr_act_scale), "weight_scale": f(cfg.lr_weight_scale)}


def _fit(params, qs_set, model_cfg, plan, cfg: TrainConfig, train: ToyDataset, dev: ToyDataset,
         epochs: int, weight_lr: float, teacher, distill, sink: MetricsSink | None, phase: str):
    if len(train) == 0:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * epochs
    best = (-1.0, copy.deepcopy(params), copy.deepcopy(qs_set))
    refs = {k: q.s.copy() for k, q in qs_set.items()} if qs_set and cfg.scale_lr_relative else None
    step = 0

    def evaluate(epoch):
        nonlocal best
        acc = accuracy(params, model_cfg, dev, plan, qs_set)
        if sink:
            sink({"phase": phase, "event": "eval", "step": step, "epoch": epoch, "dev_accuracy": acc})
        if acc > best[0]:
            best = (acc, copy.deepcopy(params), copy.deepcopy(qs_set))

    for epoch in range(epochs):
        for batch in train.batches(cfg.batch_size, rng):
            lrs = _lrs(step, total, cfg, weight_lr)
            comps = train_step(params, qs_set, batch, opt, model_cfg, plan, cfg, lrs, teacher, distill, step, refs)
            step += 1
            if sink:
                sink({"phase": phase, "event": "step", "step": step, "lr": lrs, **comps})
            if cfg.eval_every and step % cfg.eval_every == 0:
                evaluate(epoch)
        evaluate(epoch)
    return best, opt


def finetune(params, model_cfg: EncoderConfig, cfg: TrainConfig, train: ToyDataset, dev: ToyDataset,
             sink: MetricsSink | None = None):
    """Float32 task training; returns (best_params, best_dev_accuracy, optimizer)."""
    plan = LayerBitConfig.float32(model_cfg.layers)
    params = copy.deepcopy(params)
    (acc, best, _), opt = _fit(params, None, model_cfg, plan, cfg, train, dev, cfg.finetune_epochs,
                               cfg.finetune_lr, None, None, sink, "finetune")
    return best, acc, opt


def qat(params, qs_set: QuantScales, model_cfg: EncoderConfig, plan: LayerBitConfig, cfg: TrainConfig,
        train: ToyDataset, dev: ToyDataset, teacher: Teacher | None = None, sink: MetricsSink | None = None):
    """Quantization-aware training of weights and (optionally) scales.

    Returns (best_params, best_scales, best_dev_accuracy, optimizer).
    """
    params = copy.deepcopy(params)
    qs_set = copy.deepcopy(qs_set)
    for qs in qs_set.values():
        qs.grad_mode = cfg.grad_mode
    if teacher is not None and cfg.distill.active and teacher.cfg.heads != model_cfg.heads:
        raise ContractError(f"teacher has {teacher.cfg.heads} heads, student {model_cfg.heads}")
    (acc, best_p, best_q), opt = _fit(params, qs_set, model_cfg, plan, cfg, train, dev, cfg.epochs,
                                      cfg.lr_weight, teacher, cfg.distill, sink, "qat")
    return best_p, best_q, acc, opt
