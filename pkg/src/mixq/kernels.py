"""Integer inference path: packed int4/int8 matrices, exact integer GEMM,
dequantizing epilogue, an integer encoder, and a latency benchmark.

Storage formats
---------------
* int4: two's-complement nibbles, two per byte, low nibble = even column.
  The code range is [-7, 8]; since -8 is never produced, the nibble 0x8
  decodes to +8. Odd column counts pad each row with a zero nibble.
* int8: one byte per code, range [-127, 128]; the byte 0x80 decodes to +128.

Both GEMMs take ``b`` as an (n, k) matrix (one row per output feature) and
return ``a @ b.T`` as int32. int8 multiplies in int32; int4 products are at
most 64 in magnitude, so the int4 kernel sums runs of up to 511 products in
int16 lanes before widening, which is where its speed over int8 comes from.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from . import tensor as T
from .errors import ContractError, KernelBoundError, ShapeError
from .model import (
    EncoderConfig,
    EncoderParams,
    LayerBitConfig,
    QuantScales,
    act_key,
    init_params,
    weight_key,
)
from .quant import QuantScale, calibrate_weight, quantize_int

INT4_MIN, INT4_MAX = -7, 8
INT8_MIN, INT8_MAX = -127, 128
INT32_MAX = 2**31 - 1
_INT4_MAX_PRODUCT = 64
_INT8_MAX_PRODUCT = 128 * 128
_INT16_CHUNK = 32767 // _INT4_MAX_PRODUCT  # 511


# -- matrix types ----------------------------------------------------------------

@dataclass
class PackedInt4Matrix:
    rows: int
    cols: int
    data: np.ndarray  # uint8, (rows, ceil(cols/2))
    row_scales: np.ndarray | None = None

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.shape != (self.rows, (self.cols + 1) // 2):
            raise ShapeError(f"packed buffer {self.data.shape}/{self.data.dtype} does not match {self.rows}x{self.cols}")

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


@dataclass
class Int8Matrix:
    rows: int
    cols: int
    data: np.ndarray  # uint8, (rows, cols)
    row_scales: np.ndarray | None = None

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.shape != (self.rows, self.cols):
            raise ShapeError(f"int8 buffer {self.data.shape}/{self.data.dtype} does not match {self.rows}x{self.cols}")

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def _check_codes(codes: np.ndarray, lo: int, hi: int, what: str) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeError(f"{what}: expected a 2-D code matrix")
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise ContractError(f"{what}: codes must lie in [{lo}, {hi}]")
    return codes


def pack_int4(codes: np.ndarray, row_scales: np.ndarray | None = None) -> PackedInt4Matrix:
    codes = _check_codes(codes, INT4_MIN, INT4_MAX, "pack_int4")
    rows, cols = codes.shape
    nib = (codes.astype(np.int16) & 0xF).astype(np.uint8)
    if cols % 2:
        nib = np.concatenate([nib, np.zeros((rows, 1), np.uint8)], axis=1)
    data = nib[:, 0::2] | (nib[:, 1::2] << 4)
    return PackedInt4Matrix(rows, cols, np.ascontiguousarray(data), row_scales)


def _nibble_value(n: np.ndarray) -> np.ndarray:
    n = n.astype(np.int16)
    return np.where(n == 8, 8, np.where(n > 8, n - 16, n))


def unpack_int4(p: PackedInt4Matrix) -> np.ndarray:
    out = np.empty((p.rows, 2 * p.data.shape[1]), dtype=np.int8)
    out[:, 0::2] = _nibble_value(p.data & 0xF)
    out[:, 1::2] = _nibble_value(p.data >> 4)
    return out[:, : p.cols]


def pack_int8(codes: np.ndarray, row_scales: np.ndarray | None = None) -> Int8Matrix:
    codes = _check_codes(codes, INT8_MIN, INT8_MAX, "pack_int8")
    rows, cols = codes.shape
    data = (codes.astype(np.int16) & 0xFF).astype(np.uint8)
    return Int8Matrix(rows, cols, np.ascontiguousarray(data), row_scales)


def unpack_int8(m: Int8Matrix) -> np.ndarray:
    b = m.data.astype(np.int16)
    return np.where(b == 128, 128, np.where(b > 128, b - 256, b)).astype(np.int16)


# -- kernels ------------------------------------------------------------------------

@numba.njit(cache=True)
def _decode_int4_t(packed, cols):
    # (rows, ceil(cols/2)) nibbles -> (cols, rows) int8, transposed for the axpy loop
    rows = packed.shape[0]
    out = np.empty((cols, rows), np.int8)
    for r in range(rows):
        for c in range(cols):
            byte = np.int32(packed[r, c >> 1])
            nib = (byte >> 4) if (c & 1) else (byte & 15)
            out[c, r] = ((nib + 7) & 15) - 7
    return out


@numba.njit(cache=True)
def _decode_int4(packed, cols):
    rows = packed.shape[0]
    out = np.empty((rows, cols), np.int8)
    for r in range(rows):
        for c in range(cols):
            byte = np.int32(packed[r, c >> 1])
            nib = (byte >> 4) if (c & 1) else (byte & 15)
            out[r, c] = ((nib + 7) & 15) - 7
    return out


@numba.njit(cache=True)
def _gemm_int4_kernel(a, bt, chunk):
    # a: (m, k) int8, bt: (k, n) int8 -> (m, n) int32
    m, k = a.shape
    n = bt.shape[1]
    out = np.zeros((m, n), np.int32)
    acc16 = np.zeros(n, np.int16)
    for i in range(m):
        acc = out[i]
        for c0 in range(0, k, chunk):
            acc16[:] = 0
            for p in range(c0, min(c0 + chunk, k)):
                x = np.int16(a[i, p])
                row = bt[p]
                for j in range(n):
                    acc16[j] = np.int16(acc16[j] + x * np.int16(row[j]))
            for j in range(n):
                acc[j] += np.int32(acc16[j])
    return out


@numba.njit(cache=True)
def _decode_int8_t(data):
    rows, cols = data.shape
    out = np.empty((cols, rows), np.int16)
    for r in range(rows):
        for c in range(cols):
            out[c, r] = ((np.int32(data[r, c]) + 127) & 255) - 127
    return out


@numba.njit(cache=True)
def _decode_int8(data):
    rows, cols = data.shape
    out = np.empty((rows, cols), np.int16)
    for r in range(rows):
        for c in range(cols):
            out[r, c] = ((np.int32(data[r, c]) + 127) & 255) - 127
    return out


@numba.njit(cache=True)
def _gemm_int8_kernel(a, bt):
    # a: (m, k) int16, bt: (k, n) int16 -> (m, n) int32
    m, k = a.shape
    n = bt.shape[1]
    out = np.zeros((m, n), np.int32)
    for i in range(m):
        acc = out[i]
        for p in range(k):
            x = np.int32(a[i, p])
            row = bt[p]
            for j in range(n):
                acc[j] += x * np.int32(row[j])
    return out


def _check_gemm(a, b, max_product: int):
    if a.cols != b.cols:
        raise ShapeError(f"inner dimensions differ: {a.cols} vs {b.cols}")
    if max_product * a.cols > INT32_MAX:
        raise KernelBoundError(f"k={a.cols} could overflow int32 accumulation")


def gemm_int4(a: PackedInt4Matrix, b: PackedInt4Matrix) -> np.ndarray:
    """Exact ``unpack(a) @ unpack(b).T`` in int32."""
    _check_gemm(a, b, _INT4_MAX_PRODUCT)
    if a.cols == 0:
        return np.zeros((a.rows, b.rows), np.int32)
    return _gemm_int4_kernel(_decode_int4(a.data, a.cols), _decode_int4_t(b.data, b.cols), _INT16_CHUNK)


def gemm_int8(a: Int8Matrix, b: Int8Matrix) -> np.ndarray:
    """Exact ``unpack(a) @ unpack(b).T`` in int32."""
    _check_gemm(a, b, _INT8_MAX_PRODUCT)
    if a.cols == 0:
        return np.zeros((a.rows, b.rows), np.int32)
    return _gemm_int8_kernel(_decode_int8(a.data), _decode_int8_t(b.data))


def dequantize_epilogue(acc: np.ndarray, a_scales, b_scales, bias=None) -> np.ndarray:
    """out[i, j] = acc[i, j] * a_scales[i] * b_scales[j] + bias[j], in float32."""
    a_scales = np.asarray(a_scales, np.float32)
    b_scales = np.asarray(b_scales, np.float32)
    if a_scales.shape != (acc.shape[0],) or b_scales.shape != (acc.shape[1],):
        raise ShapeError(f"scale shapes {a_scales.shape}, {b_scales.shape} do not match accumulator {acc.shape}")
    out = acc.astype(np.float32) * a_scales[:, None] * b_scales[None, :]
    if bias is not None:
        bias = np.asarray(bias, np.float32)
        if bias.shape != (acc.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {acc.shape[1]} columns")
        out += bias
    return out


# -- integer encoder -----------------------------------------------------------------

@dataclass
class IntLinear:
    """One GEMM of the integer path. ``weight`` is packed unless precision is float32."""

    precision: str
    weight: object  # PackedInt4Matrix | Int8Matrix | np.ndarray (float32)
    bias: np.ndarray
    act_scale: QuantScale | None = None

    @classmethod
    def build(cls, precision, w, b, w_qs: QuantScale | None, a_qs: QuantScale | None) -> "IntLinear":
        if precision == "float32":
            return cls(precision, np.asarray(w, np.float32), np.asarray(b, np.float32))
        codes = quantize_int(w, w_qs)
        pack = pack_int4 if precision == "int4" else pack_int8
        return cls(precision, pack(codes, w_qs.s.astype(np.float32)), np.asarray(b, np.float32), a_qs)

    @property
    def weight_bytes(self) -> int:
        return self.weight.nbytes

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.precision == "float32":
            return x @ self.weight.T + self.bias
        codes = quantize_int(x, self.act_scale)
        if self.precision == "int4":
            acc = gemm_int4(pack_int4(codes), self.weight)
        else:
            acc = gemm_int8(pack_int8(codes), self.weight)
        a_s = np.full(x.shape[0], self.act_scale.s, np.float32)
        return dequantize_epilogue(acc, a_s, self.weight.row_scales, self.bias)


def _stack_scales(qs: list[QuantScale]) -> QuantScale:
    return QuantScale(np.concatenate([q.s for q in qs]), qs[0].bits, "row", qs[0].grad_mode, "weight_scale")


@dataclass
class IntLayer:
    qkv: IntLinear
    out: IntLinear
    ffn1: IntLinear
    ffn2: IntLinear
    ln: dict
    heads: int
    eps: float

    @property
    def weight_bytes(self) -> int:
        return sum(l.weight_bytes for l in (self.qkv, self.out, self.ffn1, self.ffn2))

    def __call__(self, x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        """x: (N_valid, d) rows of all sequences; offsets: (B+1,) row boundaries."""
        n, d = x.shape
        dk = d // self.heads
        qkv = self.qkv(x)
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        ctx = np.empty_like(x)
        inv = np.float32(1.0 / math.sqrt(dk))
        for s, e in zip(offsets[:-1], offsets[1:]):
            if e == s:
                continue
            qs = q[s:e].reshape(e - s, self.heads, dk).transpose(1, 0, 2)
            ks = k[s:e].reshape(e - s, self.heads, dk).transpose(1, 0, 2)
            vs = v[s:e].reshape(e - s, self.heads, dk).transpose(1, 0, 2)
            A = T.softmax_rows(qs @ ks.transpose(0, 2, 1) * inv)
            ctx[s:e] = (A @ vs).transpose(1, 0, 2).reshape(e - s, d)
        h1, _ = T.layernorm(x + self.out(ctx), self.ln["ln1_g"], self.ln["ln1_b"], self.eps)
        f = self.ffn2(T.gelu(self.ffn1(h1)))
        h2, _ = T.layernorm(h1 + f, self.ln["ln2_g"], self.ln["ln2_b"], self.eps)
        return h2


def build_int_layer(params: EncoderParams, layer: int, cfg: EncoderConfig, precision: str,
                    qs_set: QuantScales | None) -> IntLayer:
    p = lambda n: params[weight_key(layer, n)]  # noqa: E731
    quant = precision != "float32"
    if quant and qs_set is None:
        raise ContractError(f"layer {layer} is {precision} but no scales were given")
    wq = lambda n: qs_set[weight_key(layer, n)] if quant else None  # noqa: E731
    aq = lambda n: qs_set[act_key(layer, n)] if quant else None  # noqa: E731
    w_qkv = np.concatenate([p("wq"), p("wk"), p("wv")])
    b_qkv = np.concatenate([p("bq"), p("bk"), p("bv")])
    s_qkv = _stack_scales([wq("wq"), wq("wk"), wq("wv")]) if quant else None
    ln = {k: params[f"l{layer}.{k}"].astype(np.float32) for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
    return IntLayer(
        qkv=IntLinear.build(precision, w_qkv, b_qkv, s_qkv, aq("attn_in")),
        out=IntLinear.build(precision, p("wo"), p("bo"), wq("wo"), aq("ctx")),
        ffn1=IntLinear.build(precision, p("w1"), p("b1"), wq("w1"), aq("ffn_in")),
        ffn2=IntLinear.build(precision, p("w2"), p("b2"), wq("w2"), aq("ffn_mid")),
        ln=ln, heads=cfg.heads, eps=cfg.ln_eps,
    )


def rows_from_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of valid tokens and per-sequence row offsets."""
    lengths = mask.sum(axis=1)
    if not np.all(mask == (np.arange(mask.shape[1])[None, :] < lengths[:, None])):
        raise ContractError("integer path expects right-padded sequences")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return np.flatnonzero(mask.ravel()), offsets


class IntegerEncoder:
    """Encoder that runs every quantized GEMM through the integer kernels.

    Embedding, softmax, GELU, layernorm and the classifier stay float32;
    padding is removed so GEMM row counts equal the number of valid tokens.
    """

    def __init__(self, params: EncoderParams, cfg: EncoderConfig, plan: LayerBitConfig, qs_set: QuantScales | None):
        self.cfg = cfg
        self.plan = plan
        f32 = lambda k: np.asarray(params[k], np.float32)  # noqa: E731
        self.embed = {k: f32(k) for k in ("tok_emb", "pos_emb", "emb_ln_g", "emb_ln_b")}
        self.head = {k: f32(k) for k in ("cls_w", "cls_b")}
        self.layers = [build_int_layer(params, i, cfg, plan.layers[i], qs_set) for i in range(cfg.layers)]

    @property
    def weight_bytes(self) -> int:
        return sum(l.weight_bytes for l in self.layers)

    def logits(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        tokens = np.asarray(tokens)
        if mask is None:
            mask = np.ones(tokens.shape, bool)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ContractError("token id out of range")
        idx, offsets = rows_from_mask(mask)
        pos = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape).ravel()[idx]
        x = self.embed["tok_emb"][tokens.ravel()[idx]] + self.embed["pos_emb"][pos]
        x, _ = T.layernorm(x, self.embed["emb_ln_g"], self.embed["emb_ln_b"], self.cfg.ln_eps)
        for layer in self.layers:
            x = layer(x, offsets)
        pooled = np.zeros((tokens.shape[0], x.shape[1]), np.float32)
        for b, (s, e) in enumerate(zip(offsets[:-1], offsets[1:])):
            if e > s:
                pooled[b] = x[s:e].sum(axis=0) / np.float32(e - s)
        return pooled @ self.head["cls_w"].T + self.head["cls_b"]

    def predict(self, tokens, mask=None, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(tokens), batch_size):
            m = None if mask is None else mask[i:i + batch_size]
            out.append(self.logits(tokens[i:i + batch_size], m).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)


# -- benchmark ------------------------------------------------------------------------

REFERENCE_LABEL = "published reference, NVIDIA T4, BERT-base layer: context only, not a target"
REFERENCE_ROWS = (
    # batch, valid tokens, float32 / int8 / int4 microseconds
    (16, 440, 1380.0, 213.1, 160.5),
    (16, 537, 1845.0, 245.7, 179.3),
    (16, 681, 2690.0, 260.9, 196.5),
    (64, 1691, 6398.0, 567.4, 428.8),
    (64, 2011, 7185.0, 628.4, 490.1),
    (64, 2298, 7897.0, 669.9, 533.4),
)


def reference_table() -> dict:
    cols = ("batch", "valid_tokens", "float32_us", "int8_us", "int4_us")
    return {"label": REFERENCE_LABEL, "rows": [dict(zip(cols, r)) for r in REFERENCE_ROWS]}


def _time(fn, rounds: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(rounds)
    for r in range(rounds):
        t0 = time.perf_counter()
        fn()
        out[r] = time.perf_counter() - t0
    return out * 1e6


def split_lengths(total: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Random positive sequence lengths for ``batch`` sequences summing to ``total``."""
    if total < batch:
        raise ContractError("need at least one valid token per sequence")
    cuts = np.sort(rng.choice(np.arange(1, total), size=batch - 1, replace=False)) if batch > 1 else np.array([], int)
    return np.diff(np.concatenate([[0], cuts, [total]]))


@dataclass
class BenchRow:
    batch: int
    valid_tokens: int
    precision: str
    mean_us: float
    std_us: float
    rounds: int
    weight_bytes: int
    speedup_vs_float32: float | None = None

    @property
    def cv(self) -> float:
        return self.std_us / self.mean_us if self.mean_us else float("inf")


def _bench_layer_setup(cfg: EncoderConfig, precision: str, valid_tokens: int, seed: int):
    rng = np.random.default_rng(seed)
    one = EncoderConfig(layers=1, hidden=cfg.hidden, heads=cfg.heads, intermediate=cfg.intermediate,
                        vocab_size=8, max_seq_len=8, num_classes=2)
    params = init_params(one, seed)
    x = rng.standard_normal((valid_tokens, cfg.hidden)).astype(np.float32)
    qs = None
    if precision != "float32":
        bits = 4 if precision == "int4" else 8
        qs = {}
        for n in ("wq", "wk", "wv", "wo", "w1", "w2"):
            qs[weight_key(0, n)] = calibrate_weight(params[weight_key(0, n)], bits)
        # input-independent activation scales: unit-variance inputs, ~4 sigma range
        for n in ("attn_in", "ctx", "ffn_in", "ffn_mid"):
            qs[act_key(0, n)] = QuantScale(np.float32(4.0 / 2 ** (bits - 1)), bits)
    return build_int_layer(params, 0, one, precision, qs), x


def bench_layer(cfg: EncoderConfig, precision: str, batch: int, valid_tokens: int,
                rounds: int = 100, warmup: int = 3, seed: int = 0) -> BenchRow:
    """Wall-clock of one full encoder layer (GEMMs, attention, layernorm, GELU)."""
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    layer, x = _bench_layer_setup(cfg, precision, valid_tokens, seed)
    lengths = split_lengths(valid_tokens, batch, np.random.default_rng(seed))
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ts = _time(lambda: layer(x, offsets), rounds, warmup)
    return BenchRow(batch, valid_tokens, precision, float(ts.mean()), float(ts.std()), rounds, layer.weight_bytes)


def bench_gemm(size: int, precision: str, rounds: int = 20, warmup: int = 2, seed: int = 0) -> dict:
    """Wall-clock of one size×size×size integer GEMM on pre-packed operands."""
    rng = np.random.default_rng(seed)
    if precision == "int4":
        a = pack_int4(rng.integers(INT4_MIN, INT4_MAX + 1, (size, size)))
        b = pack_int4(rng.integers(INT4_MIN, INT4_MAX + 1, (size, size)))
        fn = lambda: gemm_int4(a, b)  # noqa: E731
    elif precision == "int8":
        a = pack_int8(rng.integers(INT8_MIN, INT8_MAX + 1, (size, size)))
        b = pack_int8(rng.integers(INT8_MIN, INT8_MAX + 1, (size, size)))
        fn = lambda: gemm_int8(a, b)  # noqa: E731
    else:
        a = rng.standard_normal((size, size)).astype(np.float32)
        b = rng.standard_normal((size, size)).astype(np.float32)
        fn = lambda: a @ b.T  # noqa: E731
    ts = _time(fn, rounds, warmup)
    return {"size": size, "precision": precision, "mean_us": float(ts.mean()), "std_us": float(ts.std()),
            "rounds": rounds}


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    gemm: list[dict] = field(default_factory=list)
    reference: dict = field(default_factory=reference_table)

    ROW_COLUMNS = ("batch", "valid_tokens", "precision", "mean_us", "std_us", "rounds", "weight_bytes",
                   "speedup_vs_float32")
    TABLE_COLUMNS = ("batch", "valid_tokens", "float32_us", "int8_us", "int4_us")

    def fill_speedups(self) -> None:
        base = {(r.batch, r.valid_tokens): r.mean_us for r in self.rows if r.precision == "float32"}
        for r in self.rows:
            ref = base.get((r.batch, r.valid_tokens))
            r.speedup_vs_float32 = ref / r.mean_us if ref else None

    def table(self) -> list[dict]:
        """Pivot to one line per (batch, valid_tokens) with a latency column per precision."""
        out: dict = {}
        for r in self.rows:
            line = out.setdefault((r.batch, r.valid_tokens), {"batch": r.batch, "valid_tokens": r.valid_tokens})
            line[f"{r.precision}_us"] = r.mean_us
        return [{c: line.get(c) for c in self.TABLE_COLUMNS} for line in out.values()]

    def to_dict(self) -> dict:
        return {
            "rows": [{c: getattr(r, c) for c in self.ROW_COLUMNS} for r in self.rows],
            "table": self.table(),
            "gemm": self.gemm,
            "reference": self.reference,
        }
