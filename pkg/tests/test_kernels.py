import numba
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixq import kernels as K
from mixq.errors import ContractError, KernelBoundError, ShapeError
from mixq.model import EncoderConfig, LayerBitConfig, forward, init_params
from mixq.quant import QuantScale, fake_quantize


@numba.njit(cache=True)
def triple_loop(a, b):
    # reference a @ b.T on raw codes, int64 accumulation
    m, k = a.shape
    n = b.shape[0]
    out = np.zeros((m, n), np.int64)
    for i in range(m):
        for j in range(n):
            s = 0
            for p in range(k):
                s += np.int64(a[i, p]) * np.int64(b[j, p])
            out[i, j] = s
    return out


def python_loop(a, b):
    return [[sum(int(x) * int(y) for x, y in zip(ra, rb)) for rb in b] for ra in a]


def codes(rng, shape, lo, hi):
    return rng.integers(lo, hi + 1, shape)


# -- packing ------------------------------------------------------------------------

def nibble_oracle(c):
    # two's-complement nibble except that +8 is stored as 0b1000
    return c & 0xF


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 17)), elements=st.integers(-7, 8)))
def test_int4_pack_unpack_bijection(c):
    p = K.pack_int4(c)
    assert p.data.shape == (c.shape[0], (c.shape[1] + 1) // 2)
    np.testing.assert_array_equal(K.unpack_int4(p), c)
    # byte layout: low nibble holds the even column
    assert p.data[0, 0] & 0xF == nibble_oracle(int(c[0, 0]))
    if c.shape[1] > 1:
        assert p.data[0, 0] >> 4 == nibble_oracle(int(c[0, 1]))
    # numba decoders agree with the numpy reference
    np.testing.assert_array_equal(K._decode_int4(p.data, p.cols), c)
    np.testing.assert_array_equal(K._decode_int4_t(p.data, p.cols), c.T)
    # packing is injective: repacking the unpacked codes gives the same bytes
    np.testing.assert_array_equal(K.pack_int4(K.unpack_int4(p)).data, p.data)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 17)), elements=st.integers(-127, 128)))
def test_int8_pack_unpack_bijection(c):
    m = K.pack_int8(c)
    np.testing.assert_array_equal(K.unpack_int8(m), c)
    np.testing.assert_array_equal(K._decode_int8(m.data), c)
    np.testing.assert_array_equal(K._decode_int8_t(m.data), c.T)


def test_all_byte_values_decode_uniquely():
    nibbles = np.arange(16, dtype=np.uint8)
    vals = K.unpack_int4(K.PackedInt4Matrix(1, 32, (nibbles | (nibbles << 4))[None, :].repeat(1, 0).reshape(1, 16)))
    assert sorted(set(vals.ravel().tolist())) == list(range(-7, 9))
    assert int(K.unpack_int8(K.Int8Matrix(1, 1, np.array([[0x80]], np.uint8)))[0, 0]) == 128
    assert int(K.unpack_int8(K.Int8Matrix(1, 1, np.array([[0x81]], np.uint8)))[0, 0]) == -127


def test_pack_rejects_out_of_range_codes():
    with pytest.raises(ContractError):
        K.pack_int4(np.array([[-8]]))
    with pytest.raises(ContractError):
        K.pack_int8(np.array([[129]]))
    with pytest.raises(ShapeError):
        K.pack_int4(np.array([1, 2]))


def test_packed_sizes():
    assert K.pack_int4(np.zeros((64, 64), int)).nbytes == 64 * 64 // 2
    assert K.pack_int8(np.zeros((64, 64), int)).nbytes == 64 * 64
    assert K.pack_int4(np.zeros((3, 5), int)).nbytes == 9


# -- GEMM exactness -------------------------------------------------------------------

def test_gemm_small_against_python_loops(rng):
    for _ in range(20):
        m, n, k = rng.integers(1, 6, 3)
        a, b = codes(rng, (m, k), -7, 8), codes(rng, (n, k), -7, 8)
        assert K.gemm_int4(K.pack_int4(a), K.pack_int4(b)).tolist() == python_loop(a, b)
        a, b = codes(rng, (m, k), -127, 128), codes(rng, (n, k), -127, 128)
        assert K.gemm_int8(K.pack_int8(a), K.pack_int8(b)).tolist() == python_loop(a, b)


def test_gemm_random_instances_bit_exact():
    rng = np.random.default_rng(2024)
    for i in range(600):
        m, n = rng.integers(1, 24, 2)
        # mostly small k, some crossing the int16 chunk boundary of the int4 kernel
        k = int(rng.integers(1, 64)) if i % 10 else int(rng.integers(500, 1100))
        a, b = codes(rng, (m, k), -7, 8), codes(rng, (n, k), -7, 8)
        got = K.gemm_int4(K.pack_int4(a), K.pack_int4(b))
        assert got.dtype == np.int32
        np.testing.assert_array_equal(got, triple_loop(a, b))
        a, b = codes(rng, (m, k), -127, 128), codes(rng, (n, k), -127, 128)
        got = K.gemm_int8(K.pack_int8(a), K.pack_int8(b))
        np.testing.assert_array_equal(got, triple_loop(a, b))


def test_gemm_extreme_codes():
    k = 1024
    a = np.full((2, k), 8)
    b = np.stack([np.full(k, -7), np.full(k, 8)])
    got = K.gemm_int4(K.pack_int4(a), K.pack_int4(b))
    np.testing.assert_array_equal(got, [[-57344, 65536], [-57344, 65536]])
    a8 = np.full((1, k), 128)
    got8 = K.gemm_int8(K.pack_int8(a8), K.pack_int8(np.stack([np.full(k, 128), np.full(k, -127)])))
    np.testing.assert_array_equal(got8, [[128 * 128 * k, -128 * 127 * k]])


def test_gemm_contracts():
    with pytest.raises(ShapeError):
        K.gemm_int4(K.pack_int4(np.zeros((2, 3), int)), K.pack_int4(np.zeros((2, 4), int)))
    big = 2**31 // (128 * 128) + 1
    m = K.Int8Matrix(1, big, np.zeros((1, big), np.uint8))
    with pytest.raises(KernelBoundError):
        K.gemm_int8(m, m)
    empty = K.pack_int8(np.zeros((2, 0), int))
    np.testing.assert_array_equal(K.gemm_int8(empty, empty), np.zeros((2, 2)))


def test_dequantize_epilogue(rng):
    acc = rng.integers(-1000, 1000, (3, 4)).astype(np.int32)
    sa, sb, bias = rng.uniform(0.1, 1, 3), rng.uniform(0.1, 1, 4), rng.standard_normal(4)
    out = K.dequantize_epilogue(acc, sa, sb, bias)
    np.testing.assert_allclose(out, acc * sa[:, None] * sb[None, :] + bias, rtol=1e-6)
    assert out.dtype == np.float32
    with pytest.raises(ShapeError):
        K.dequantize_epilogue(acc, sa[:2], sb)


# -- integer linear / encoder -------------------------------------------------------

@pytest.mark.parametrize("precision,bits", [("int8", 8), ("int4", 4)])
def test_int_linear_matches_fake_quant_gemm(rng, precision, bits):
    x = rng.standard_normal((9, 20)).astype(np.float32)
    w = rng.standard_normal((7, 20)).astype(np.float32)
    b = rng.standard_normal(7).astype(np.float32)
    from mixq.quant import calibrate_weight
    wq = calibrate_weight(w, bits)
    aq = QuantScale(np.float32(3.0 / 2 ** (bits - 1)), bits)
    lin = K.IntLinear.build(precision, w, b, wq, aq)
    ref = fake_quantize(x.astype(np.float64), QuantScale(np.float64(aq.s), bits)) @ \
        fake_quantize(w.astype(np.float64), QuantScale(wq.s.astype(np.float64), bits, "row")).T + b
    np.testing.assert_allclose(lin(x), ref, rtol=1e-5, atol=1e-5)


def _model_and_scales(plan_layers, seed=0):
    from mixq.trainer import run_calibration
    from mixq.data import make_synthetic
    cfg = EncoderConfig(layers=len(plan_layers), hidden=32, heads=4, intermediate=64, vocab_size=20, max_seq_len=12)
    params = init_params(cfg, seed)
    params = {k: (v * 20 if v.std() > 0 else v) for k, v in params.items()}
    data = make_synthetic(64, 12, 20, seed=seed, min_len=4)
    plan = LayerBitConfig(plan_layers)
    qs, _ = run_calibration(params, cfg, plan, data, 4, 16)
    return cfg, params, plan, qs, data


def test_integer_encoder_tracks_fake_quant_forward():
    cfg, params, plan, qs, data = _model_and_scales(["int8", "int8", "int4", "int4"])
    enc = K.IntegerEncoder(params, cfg, plan, qs)
    ref, _ = forward(data.tokens, params, cfg, plan, qs, mask=data.mask)
    got = enc.logits(data.tokens, data.mask)
    assert np.sqrt(np.mean((got - ref) ** 2)) <= 1e-3
    assert (got.argmax(1) == ref.argmax(1)).mean() >= 0.99


def test_integer_encoder_float_plan_matches_forward():
    cfg, params, _, _, data = _model_and_scales(["float32", "float32"])
    plan = LayerBitConfig.float32(2)
    enc = K.IntegerEncoder(params, cfg, plan, None)
    ref, _ = forward(data.tokens, params, cfg, plan, mask=data.mask)
    np.testing.assert_allclose(enc.logits(data.tokens, data.mask), ref, atol=1e-5)


def test_integer_encoder_contracts():
    cfg, params, plan, qs, data = _model_and_scales(["int8"])
    with pytest.raises(ContractError):
        K.IntegerEncoder(params, cfg, plan, None)
    enc = K.IntegerEncoder(params, cfg, plan, qs)
    bad = data.mask.copy()
    bad[0, 0] = False
    bad[0, 1] = True
    with pytest.raises(ContractError):
        enc.logits(data.tokens, bad)


def test_weight_bytes_ratios():
    cfg = EncoderConfig(layers=1, hidden=64, heads=4, intermediate=256)
    sizes = {}
    for prec in ("float32", "int8", "int4"):
        layer, _ = K._bench_layer_setup(cfg, prec, 16, 0)
        sizes[prec] = layer.weight_bytes
    assert sizes["int4"] * 8 == sizes["float32"]
    assert sizes["int8"] * 4 == sizes["float32"]


# -- benchmark --------------------------------------------------------------------------

def test_split_lengths(rng):
    lengths = K.split_lengths(100, 7, rng)
    assert lengths.sum() == 100 and lengths.min() >= 1 and lengths.size == 7
    with pytest.raises(ContractError):
        K.split_lengths(3, 4, rng)


def test_bench_report_grid_and_columns():
    cfg = EncoderConfig(layers=1, hidden=32, heads=4, intermediate=64)
    rep = K.BenchReport()
    for batch, vt in ((16, 64), (64, 128)):
        for prec in ("float32", "int8", "int4"):
            rep.rows.append(K.bench_layer(cfg, prec, batch, vt, rounds=2, warmup=1))
    rep.fill_speedups()
    assert len(rep.rows) == 6
    by = {(r.batch, r.precision): r for r in rep.rows}
    assert by[(16, "int4")].weight_bytes < by[(16, "int8")].weight_bytes
    assert by[(16, "float32")].speedup_vs_float32 == pytest.approx(1.0)
    d = rep.to_dict()
    assert all(set(r) == set(K.BenchReport.ROW_COLUMNS) for r in d["rows"])
    assert all(tuple(r) == K.BenchReport.TABLE_COLUMNS for r in d["table"])
    assert "not a target" in d["reference"]["label"]
    assert len(d["reference"]["rows"]) == 6


def test_bench_gemm_row():
    row = K.bench_gemm(32, "int4", rounds=2, warmup=1)
    assert row["size"] == 32 and row["mean_us"] > 0
