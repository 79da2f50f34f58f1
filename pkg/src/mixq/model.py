"""Post-layernorm Transformer encoder with per-layer fake quantization.

Parameters live in a flat ``dict[str, ndarray]``. Per layer ``i`` the six
weight GEMMs ``l{i}.wq``, ``wk``, ``wv``, ``wo``, ``w1``, ``w2`` are quantized
at the layer's precision (weights per output row, activations per tensor);
``q·kᵀ``, ``A·v``, softmax, GELU and layernorm stay in floating point.
The embeddings and the classifier head are never quantized.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .quant import QuantScale, fake_quantize, input_grad_ste, scale_grad

Precision = Literal["float32", "int8", "int4"]
PRECISION_BITS = {"float32": 32, "int8": 8, "int4": 4}
MASK_BIAS = -1e9

WEIGHT_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2")
# activation quantizer feeding each weight GEMM; q/k/v share their input
ACT_OF_WEIGHT = {"wq": "attn_in", "wk": "attn_in", "wv": "attn_in", "wo": "ctx", "w1": "ffn_in", "w2": "ffn_mid"}
ACT_NAMES = ("attn_in", "ctx", "ffn_in", "ffn_mid")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    intermediate: int = 256
    vocab_size: int = 64
    max_seq_len: int = 32
    num_classes: int = 2
    ln_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.heads < 1 or self.hidden % self.heads:
            raise ContractError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.layers < 0:
            raise ContractError("layers must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerBitConfig:
    """Precision of each encoder layer; the embedding is always float32."""

    layers: list[str]
    embedding: str = "float32"

    def __post_init__(self):
        bad = [p for p in self.layers if p not in PRECISION_BITS]
        if bad:
            raise ContractError(f"unknown precision(s) {bad}")
        if self.embedding != "float32":
            raise ContractError("the embedding layer is never quantized")

    @classmethod
    def float32(cls, n_layers: int) -> "LayerBitConfig":
        return cls(["float32"] * n_layers)

    def bits(self, layer: int) -> int:
        return PRECISION_BITS[self.layers[layer]]

    def is_quantized(self, layer: int) -> bool:
        return self.layers[layer] != "float32"


EncoderParams = dict  # str -> np.ndarray
QuantScales = dict  # str -> QuantScale


def weight_key(layer: int, name: str) -> str:
    return f"l{layer}.{name}"


def act_key(layer: int, name: str) -> str:
    return f"l{layer}.{name}.act"


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d, di = cfg.hidden, cfg.intermediate

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dtype)

    p = {
        "tok_emb": normal(cfg.vocab_size, d),
        "pos_emb": normal(cfg.max_seq_len, d),
        "emb_ln_g": np.ones(d, dtype),
        "emb_ln_b": np.zeros(d, dtype),
    }
    for i in range(cfg.layers):
        for name, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
                            ("w1", (di, d)), ("w2", (d, di))):
            p[weight_key(i, name)] = normal(*shape)
            p[weight_key(i, "b" + name[1:])] = np.zeros(shape[0], dtype)
        for ln in ("ln1", "ln2"):
            p[f"l{i}.{ln}_g"] = np.ones(d, dtype)
            p[f"l{i}.{ln}_b"] = np.zeros(d, dtype)
    p["cls_w"] = normal(cfg.num_classes, d)
    p["cls_b"] = np.zeros(cfg.num_classes, dtype)
    return p


def validate_params(params: EncoderParams, cfg: EncoderConfig) -> None:
    ref = init_params(cfg, 0)
    if set(ref) != set(params):
        raise ShapeError(f"parameter names differ: {sorted(set(ref) ^ set(params))}")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ShapeError(f"{k}: shape {params[k].shape}, expected {v.shape}")


@dataclass
class ForwardTrace:
    """Features captured during a forward pass, plus the caches for backward.

    Per layer: ``attn`` (B,H,T,T), ``head_out`` (B,H,T,dk), ``values`` (B,H,T,dk),
    ``mha_out`` (B,T,d) and ``ffn_out`` (B,T,d).
    """

    attn: list = field(default_factory=list)
    head_out: list = field(default_factory=list)
    values: list = field(default_factory=list)
    mha_out: list = field(default_factory=list)
    ffn_out: list = field(default_factory=list)
    logits: np.ndarray | None = None
    mask: np.ndarray | None = None
    head_dim: int = 0
    caches: dict = field(default_factory=dict, repr=False)
    inputs: dict = field(default_factory=dict, repr=False)

    @property
    def num_heads(self) -> int:
        return self.attn[-1].shape[1] if self.attn else 0


# -- quantized linear ---------------------------------------------------------

def qlinear(x, w, b, act_qs: QuantScale | None, w_qs: QuantScale | None):
    """y = Q(x) @ Q(w)ᵀ + b with w laid out (out_features, in_features)."""
    xq = fake_quantize(x, act_qs) if act_qs is not None else x
    wq = fake_quantize(w, w_qs) if w_qs is not None else w
    y = T.matmul(xq, wq.T) + b
    return y, (x, w, xq, wq, act_qs, w_qs)


def qlinear_backward(dy, cache, shared_input: bool = False):
    """Backward of :func:`qlinear`: (dx, dw, db, d_act_scale, d_weight_scale).

    ``shared_input`` marks a GEMM whose input quantizer is also used by an
    earlier GEMM; the MSE rule depends only on the tensor, so it is counted once.
    """
    x, w, xq, wq, act_qs, w_qs = cache
    dxq = T.matmul(dy, wq)
    dy2 = dy.reshape(-1, dy.shape[-1])
    dwq = T.matmul(dy2.T, xq.reshape(-1, xq.shape[-1]))
    db = dy2.sum(axis=0)
    dx = input_grad_ste(dxq, x, act_qs) if act_qs is not None else dxq
    dw = input_grad_ste(dwq, w, w_qs) if w_qs is not None else dwq
    ds_act = None
    if act_qs is not None and not (shared_input and act_qs.grad_mode == "MSE"):
        ds_act = scale_grad(x, act_qs, dxq)
    ds_w = scale_grad(w, w_qs, dwq) if w_qs is not None else None
    return dx, dw, db, ds_act, ds_w


# -- attention ------------------------------------------------------------------

def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def key_mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """(B,1,1,T) additive bias that removes padded keys from every softmax."""
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)[:, None, None, :]


def _layer_scales(qs_set: QuantScales | None, layer: int, quantized: bool):
    if not quantized:
        return {n: None for n in WEIGHT_NAMES}, {n: None for n in ACT_NAMES}
    if qs_set is None:
        raise ContractError(f"layer {layer} is quantized but no scales were given")
    try:
        w = {n: qs_set[weight_key(layer, n)] for n in WEIGHT_NAMES}
        a = {n: qs_set[act_key(layer, n)] for n in ACT_NAMES}
    except KeyError as e:
        raise ContractError(f"missing quantization scale {e}") from None
    return w, a


def attention(h, params, layer, heads, mask_bias, w_qs, a_qs):
    """Multi-head self-attention block up to (not including) the output projection.

    Returns (A, head_out, v, ctx, cache), with A = softmax(q·kᵀ/√d_k).
    """
    pre = f"l{layer}."
    aq = a_qs["attn_in"]
    q, cq = qlinear(h, params[pre + "wq"], params[pre + "bq"], aq, w_qs["wq"])
    k, ck = qlinear(h, params[pre + "wk"], params[pre + "bk"], aq, w_qs["wk"])
    v, cv = qlinear(h, params[pre + "wv"], params[pre + "bv"], aq, w_qs["wv"])
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    inv = h.dtype.type(1.0 / math.sqrt(qh.shape[-1]))
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * inv
    if mask_bias is not None:
        scores = scores + mask_bias
    A = T.softmax_rows(scores)
    oh = T.matmul(A, vh)
    return A, oh, vh, _merge_heads(oh), (cq, ck, cv, qh, kh, vh, inv)


def attention_head(h, params, layer, head, heads, qs_set=None, mask=None):
    """Single head view of :func:`attention` for a (T, d) input; returns (A, OA, v)."""
    quant = qs_set is not None
    w_qs, a_qs = _layer_scales(qs_set, layer, quant)
    if h.ndim != 2:
        raise ShapeError("attention_head expects a (seq, hidden) input")
    mb = key_mask_bias(mask[None], h.dtype) if mask is not None else None
    A, oh, vh, _, _ = attention(h[None], params, layer, heads, mb, w_qs, a_qs)
    return A[0, head], oh[0, head], vh[0, head]


def encoder_layer(h, params, layer, cfg: EncoderConfig, bit_config: LayerBitConfig,
                  qs_set: QuantScales | None, mask_bias=None):
    """One encoder layer. Returns (h_next, features, cache)."""
    pre = f"l{layer}."
    w_qs, a_qs = _layer_scales(qs_set, layer, bit_config.is_quantized(layer))
    A, oh, vh, ctx, attn_cache = attention(h, params, layer, cfg.heads, mask_bias, w_qs, a_qs)
    mha, co = qlinear(ctx, params[pre + "wo"], params[pre + "bo"], a_qs["ctx"], w_qs["wo"])
    h1, ln1 = T.layernorm(h + mha, params[pre + "ln1_g"], params[pre + "ln1_b"], cfg.ln_eps)
    u, c1 = qlinear(h1, params[pre + "w1"], params[pre + "b1"], a_qs["ffn_in"], w_qs["w1"])
    g = T.gelu(u)
    f, c2 = qlinear(g, params[pre + "w2"], params[pre + "b2"], a_qs["ffn_mid"], w_qs["w2"])
    h2, ln2 = T.layernorm(h1 + f, params[pre + "ln2_g"], params[pre + "ln2_b"], cfg.ln_eps)
    features = {"attn": A, "head_out": oh, "values": vh, "mha_out": mha, "ffn_out": f}
    cache = {"attn": attn_cache, "A": A, "o": co, "ln1": ln1, "u": u, "f1": c1, "f2": c2, "ln2": ln2}
    return h2, features, cache


def _check_tokens(tokens, cfg: EncoderConfig):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError("tokens must be a (batch, seq) array")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError("token id out of range")
    return tokens


def embed(tokens, params, cfg: EncoderConfig):
    t = tokens.shape[1]
    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    return T.layernorm(x, params["emb_ln_g"], params["emb_ln_b"], cfg.ln_eps)


def pool(h, mask):
    m = mask.astype(h.dtype)[..., None]
    cnt = np.maximum(m.sum(axis=1), 1.0)
    return (h * m).sum(axis=1) / cnt, m / cnt[:, None, :]


def forward(tokens, params: EncoderParams, cfg: EncoderConfig, bit_config: LayerBitConfig | None = None,
            qs_set: QuantScales | None = None, mask=None, capture: bool = False):
    """Encoder forward pass. Returns ``(logits, trace)``; trace is None unless ``capture``."""
    tokens = _check_tokens(tokens, cfg)
    if bit_config is None:
        bit_config = LayerBitConfig.float32(cfg.layers)
    if len(bit_config.layers) != cfg.layers:
        raise ContractError(f"bit config has {len(bit_config.layers)} layers, model has {cfg.layers}")
    if mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    dtype = params["tok_emb"].dtype
    h, emb_cache = embed(tokens, params, cfg)
    mb = None if mask.all() else key_mask_bias(mask, dtype)
    trace = ForwardTrace(mask=mask, head_dim=cfg.head_dim) if capture else None
    layer_caches = []
    for i in range(cfg.layers):
        h, feats, cache = encoder_layer(h, params, i, cfg, bit_config, qs_set, mb)
        if capture:
            for k, v in feats.items():
                getattr(trace, k).append(v)
            layer_caches.append(cache)
    pooled, pool_w = pool(h, mask)
    logits = T.matmul(pooled, params["cls_w"].T) + params["cls_b"]
    if capture:
        trace.logits = logits
        trace.caches = {"emb": emb_cache, "layers": layer_caches, "pooled": pooled, "pool_w": pool_w}
        trace.inputs = {"tokens": tokens, "bit_config": bit_config, "mask_bias": mb}
    return logits, trace


def backward(logits_grad, trace: ForwardTrace, params: EncoderParams, cfg: EncoderConfig,
             feature_grads: dict | None = None):
    """Backpropagate through a captured forward pass.

    ``feature_grads`` optionally injects extra gradients at trace features,
    keyed ``(name, layer)`` with name in {"attn", "attn_logits", "head_out",
    "values"}; ``attn_logits`` is the gradient w.r.t. the pre-softmax scores.
    Returns ``(param_grads, scale_grads)``; scale gradients follow each
    QuantScale's ``grad_mode``.
    """
    if trace is None or not trace.caches:
        raise ContractError("backward requires a captured forward trace")
    feature_grads = feature_grads or {}
    caches = trace.caches
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    sgrads: dict = {}
    dtype = params["tok_emb"].dtype
    logits_grad = logits_grad.astype(dtype, copy=False)

    grads["cls_w"] += T.matmul(logits_grad.T, caches["pooled"])
    grads["cls_b"] += logits_grad.sum(axis=0)
    dpooled = T.matmul(logits_grad, params["cls_w"])
    dh = caches["pool_w"] * dpooled[:, None, :]

    def add_scale(key, g):
        if g is not None:
            sgrads[key] = sgrads[key] + g if key in sgrads else g

    def lin_back(dy, cache, layer, wname):
        dx, dw, db, ds_a, ds_w = qlinear_backward(dy, cache, shared_input=wname in ("wk", "wv"))
        grads[weight_key(layer, wname)] += dw
        grads[weight_key(layer, "b" + wname[1:])] += db
        add_scale(weight_key(layer, wname), ds_w)
        add_scale(act_key(layer, ACT_OF_WEIGHT[wname]), ds_a)
        return dx

    for i in reversed(range(cfg.layers)):
        c = caches["layers"][i]
        pre = f"l{i}."
        dsum2, dg2, db2 = T.layernorm_backward(dh, c["ln2"])
        grads[pre + "ln2_g"] += dg2
        grads[pre + "ln2_b"] += db2
        dgelu = lin_back(dsum2, c["f2"], i, "w2")
        du = T.gelu_backward(c["u"], dgelu)
        dh1 = dsum2 + lin_back(du, c["f1"], i, "w1")
        dsum1, dg1, db1 = T.layernorm_backward(dh1, c["ln1"])
        grads[pre + "ln1_g"] += dg1
        grads[pre + "ln1_b"] += db1
        dctx = lin_back(dsum1, c["o"], i, "wo")
        cq, ck, cv, qh, kh, vh, inv = c["attn"]
        A = c["A"]
        doh = _split_heads(dctx, cfg.heads)
        if ("head_out", i) in feature_grads:
            doh = doh + feature_grads[("head_out", i)]
        dA = T.matmul(doh, vh.transpose(0, 1, 3, 2))
        if ("attn", i) in feature_grads:
            dA = dA + feature_grads[("attn", i)]
        dvh = T.matmul(A.transpose(0, 1, 3, 2), doh)
        if ("values", i) in feature_grads:
            dvh = dvh + feature_grads[("values", i)]
        dscores = T.softmax_backward(A, dA)
        if ("attn_logits", i) in feature_grads:
            dscores = dscores + feature_grads[("attn_logits", i)]
        dscores = dscores * inv
        dqh = T.matmul(dscores, kh)
        dkh = T.matmul(dscores.transpose(0, 1, 3, 2), qh)
        dh = dsum1
        dh = dh + lin_back(_merge_heads(dqh), cq, i, "wq")
        dh = dh + lin_back(_merge_heads(dkh), ck, i, "wk")
        dh = dh + lin_back(_merge_heads(dvh), cv, i, "wv")

    dx, dg, db = T.layernorm_backward(dh, caches["emb"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db
    tokens = trace.inputs["tokens"]
    np.add.at(grads["tok_emb"], tokens.ravel(), dx.reshape(-1, dx.shape[-1]))
    grads["pos_emb"][: tokens.shape[1]] += dx.sum(axis=0)
    return grads, sgrads
