"""Paired-seed comparison of QAT variants on the synthetic task."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

from .data import make_synthetic
from .distill import DistillConfig
from .model import EncoderConfig, init_params
from .trainer import Teacher, TrainConfig, accuracy, finetune, qat, run_calibration


@dataclass
class ArmsConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    num_examples: int = 4000
    split: tuple = (0.6, 0.4)
    min_len: int = 16
    task: str = "order"
    finetune_epochs: int = 8
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=3, lr_weight=5e-5, lr_act_scale=0.01, lr_weight_scale=0.001, scale_lr_relative=True,
        grad_mode="MSE", n_int4=2))


def arm_configs(base: TrainConfig) -> dict[str, tuple[TrainConfig, bool]]:
    """name -> (train config, uses teacher)."""
    off = DistillConfig(alpha=0.0, beta=0.0)
    return {
        "mse_kd": (replace(base, grad_mode="MSE", learn_scales=True, distill=DistillConfig()), True),
        "frozen_nokd": (replace(base, learn_scales=False, distill=off), False),
    }


def run_seed(seed: int, cfg: ArmsConfig) -> dict:
    """Teacher finetune, calibration, then every arm from the same starting point."""
    t0 = time.perf_counter()
    mc = cfg.model
    data = make_synthetic(cfg.num_examples, mc.max_seq_len, mc.vocab_size, seed, cfg.task, mc.num_classes,
                          cfg.min_len)
    parts = data.split({"train": cfg.split[0], "dev": cfg.split[1]}, seed)
    train, dev = parts["train"], parts["dev"]
    ft_cfg = replace(cfg.train, seed=seed, finetune_epochs=cfg.finetune_epochs)
    teacher_params, teacher_acc, _ = finetune(init_params(mc, seed), mc, ft_cfg, train, dev)
    plan = ft_cfg.plan_for(mc.layers)
    qs, _ = run_calibration(teacher_params, mc, plan, train, ft_cfg.calib_steps, ft_cfg.calib_batch_size,
                            ft_cfg.grad_mode, seed=seed)
    out = {"seed": seed, "teacher": teacher_acc, "calibrated": accuracy(teacher_params, mc, dev, plan, qs)}
    teacher = Teacher(teacher_params, mc)
    for name, (tc, uses_teacher) in arm_configs(replace(cfg.train, seed=seed)).items():
        _, _, acc, _ = qat(teacher_params, qs, mc, plan, tc, train, dev, teacher if uses_teacher else None)
        out[name] = acc
    out["seconds"] = time.perf_counter() - t0
    return out


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided P(X >= losses) under Binomial(wins + losses, 1/2); ties are dropped."""
    n = wins + losses
    return sum(math.comb(n, k) for k in range(losses, n + 1)) / 2 ** n if n else 1.0
