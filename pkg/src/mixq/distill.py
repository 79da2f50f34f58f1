"""Distillation losses between a student and a teacher forward trace.

Every loss returns ``(value, grads)`` where ``grads`` holds the gradient with
respect to the student's features: ``"logits"`` for the output loss and
``(feature_name, layer)`` keys that :func:`mixq.model.backward` accepts as
``feature_grads``.

KL terms are KL(student ‖ teacher), averaged over (batch × query) rows and
summed over heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .model import ForwardTrace, key_mask_bias


@dataclass
class DistillConfig:
    alpha: float = 10.0
    beta: float = 1.0
    output_loss_kind: Literal["kl", "mse"] = "kl"
    enable_mini: bool = True
    enable_output: bool = True
    # "mini": last layer only; "layerwise": every layer, same depth required
    attention_mode: Literal["mini", "layerwise"] = "mini"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.output_loss_kind not in ("kl", "mse"):
            raise ContractError(f"unknown output loss kind {self.output_loss_kind!r}")
        if self.attention_mode not in ("mini", "layerwise"):
            raise ContractError(f"unknown attention mode {self.attention_mode!r}")

    @property
    def active(self) -> bool:
        return (self.enable_output and self.alpha > 0) or (self.enable_mini and self.beta > 0)


def loss_output(student_logits, teacher_logits, kind: str = "kl"):
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if kind == "mse":
        diff = student_logits - teacher_logits
        return float((diff * diff).mean()), {"logits": 2.0 * diff / diff.dtype.type(diff.size)}
    if kind == "kl":
        p = T.softmax_rows(student_logits)
        q = T.softmax_rows(teacher_logits.astype(p.dtype, copy=False))
        return T.kl_divergence_rows(p, q), {"logits": T.kl_rows_grad_logits(p, q)}
    raise ContractError(f"unknown output loss kind {kind!r}")


def _check_heads(student: ForwardTrace, teacher: ForwardTrace):
    if not student.attn or not teacher.attn:
        raise ContractError("attention distillation needs at least one encoder layer on each side")
    if student.num_heads != teacher.num_heads:
        raise ContractError(f"head count mismatch: student {student.num_heads}, teacher {teacher.num_heads}")
    if student.attn[-1].shape[:1] + student.attn[-1].shape[2:] != teacher.attn[-1].shape[:1] + teacher.attn[-1].shape[2:]:
        raise ShapeError("student and teacher batch/sequence shapes differ")


def _head_kl(p_student, p_teacher):
    """Sum over heads of the row-mean KL, plus its gradient w.r.t. the student logits."""
    heads = p_student.shape[1]
    total = 0.0
    grad = np.empty_like(p_student)
    for a in range(heads):
        ps, pt = p_student[:, a], p_teacher[:, a].astype(p_student.dtype, copy=False)
        total += T.kl_divergence_rows(ps, pt, check=False)
        grad[:, a] = T.kl_rows_grad_logits(ps, pt)
    return total, grad


def loss_attention_mini(student: ForwardTrace, teacher: ForwardTrace):
    """Sum over heads of KL between the last-layer attention distributions.

    The gradient is taken w.r.t. the student's attention logits
    (q·kᵀ/√d_k, after masking).
    """
    _check_heads(student, teacher)
    As, At = student.attn[-1], teacher.attn[-1]
    value, dlogits = _head_kl(As, At)
    return value, {("attn_logits", len(student.attn) - 1): dlogits}


def value_relation(values, head_dim: int, mask=None):
    """softmax(v·vᵀ / √d_k) per head; ``values`` is (B,H,T,dk)."""
    g = T.matmul(values, values.transpose(0, 1, 3, 2)) * values.dtype.type(1.0 / math.sqrt(head_dim))
    if mask is not None and not mask.all():
        g = g + key_mask_bias(mask, values.dtype)
    return T.softmax_rows(g)


def loss_value_mini(student: ForwardTrace, teacher: ForwardTrace):
    """Sum over heads of KL between last-layer value-relation matrices."""
    _check_heads(student, teacher)
    vs, vt = student.values[-1], teacher.values[-1]
    rs = value_relation(vs, vs.shape[-1], student.mask)
    rt = value_relation(vt, vt.shape[-1], teacher.mask)
    value, dlogits = _head_kl(rs, rt)
    # logits = v vᵀ / √dk  =>  dv = (dG + dGᵀ) v / √dk
    inv = vs.dtype.type(1.0 / math.sqrt(vs.shape[-1]))
    dv = T.matmul(dlogits + dlogits.transpose(0, 1, 3, 2), vs) * inv
    return value, {("values", len(student.values) - 1): dv}


def loss_attention_layerwise(student: ForwardTrace, teacher: ForwardTrace):
    """Every-layer attention distillation: MSE on A and on head outputs, summed over layers and heads."""
    if len(student.attn) != len(teacher.attn):
        raise ContractError("layerwise attention distillation needs equal depth")
    _check_heads(student, teacher)
    total = 0.0
    grads = {}
    for name in ("attn", "head_out"):
        for l, (s, t) in enumerate(zip(getattr(student, name), getattr(teacher, name))):
            diff = s - t.astype(s.dtype, copy=False)
            per_head = diff.size // diff.shape[1]
            total += float((diff * diff).sum()) / per_head
            grads[(name, l)] = 2.0 * diff / diff.dtype.type(per_head)
    return total, grads


def loss_final(task_loss, output_loss, attention_loss, value_loss, cfg: DistillConfig) -> float:
    """task + alpha * output + beta * (attention + value); disabled parts count 0."""
    parts = (task_loss, output_loss, attention_loss, value_loss)
    if not all(math.isfinite(x) for x in parts):
        raise ContractError("loss components must be finite")
    out = output_loss if cfg.enable_output else 0.0
    mini = attention_loss + value_loss if cfg.enable_mini else 0.0
    return task_loss + cfg.alpha * out + cfg.beta * mini


def _merge(dst: dict, src: dict, weight: float):
    for k, v in src.items():
        g = v * v.dtype.type(weight)
        dst[k] = dst[k] + g if k in dst else g


def distill_losses(student: ForwardTrace, teacher: ForwardTrace, cfg: DistillConfig):
    """All enabled distillation terms for one batch.

    Returns ``(components, grads)``: components has ``output``, ``attention``
    and ``value``; grads are already weighted by alpha/beta.
    """
    comps = {"output": 0.0, "attention": 0.0, "value": 0.0}
    grads: dict = {}
    if cfg.enable_output and cfg.alpha > 0:
        comps["output"], g = loss_output(student.logits, teacher.logits, cfg.output_loss_kind)
        _merge(grads, g, cfg.alpha)
    if cfg.enable_mini and cfg.beta > 0:
        if cfg.attention_mode == "mini":
            comps["attention"], g = loss_attention_mini(student, teacher)
            _merge(grads, g, cfg.beta)
            comps["value"], g = loss_value_mini(student, teacher)
            _merge(grads, g, cfg.beta)
        else:
            comps["attention"], g = loss_attention_layerwise(student, teacher)
            _merge(grads, g, cfg.beta)
    return comps, grads
