"""Binary checkpoint and packed-model files.

Layout (all integers little-endian)::

    magic     4 bytes   b"MXQK" (checkpoint) or b"MXQP" (packed model)
    version   u16
    hdr_len   u32
    header    hdr_len bytes of UTF-8 JSON (sorted keys)
    n_arrays  u32
    arrays    n_arrays records:
                name_len u16, name, dtype u8, ndim u8, dims u32 * ndim, raw data
    sha256    32 bytes over everything above

Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .kernels import IntegerEncoder, IntLayer, IntLinear, PackedInt4Matrix, Int8Matrix
from .model import EncoderConfig, EncoderParams, LayerBitConfig, QuantScales, validate_params
from .quant import QuantScale
from .trainer import Adam

CHECKPOINT_MAGIC = b"MXQK"
PACKED_MAGIC = b"MXQP"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4"), 5: np.dtype("<i8")}
_CODES = {"float32": 1, "float64": 2, "uint8": 3, "int32": 4, "int64": 5}


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(magic)
    buf.write(struct.pack("<HI", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        code = _CODES.get(a.dtype.name)
        if code is None:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<HBB", len(raw), code, a.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_container(payload: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 4 + 6 + 32:
        raise CheckpointError("file too short")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; file is corrupt")
    if body[:4] != magic:
        raise CheckpointError(f"bad magic {body[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 10
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(n):
        nlen, code, ndim = struct.unpack_from("<HBB", body, off)
        off += 4
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).astype(
            dt.newbyteorder("="), copy=True)
        off += size
    if off != len(body):
        raise CheckpointError("trailing bytes after the last array")
    return header, arrays


# -- training checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: EncoderConfig
    params: EncoderParams
    bit_plan: LayerBitConfig | None = None
    scales: QuantScales | None = None
    optimizer: Adam | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {
            "kind": "checkpoint",
            "encoder": self.config.to_dict(),
            "bit_plan": self.bit_plan.layers if self.bit_plan else None,
            "scales": {k: {"bits": q.bits, "granularity": q.granularity, "grad_mode": q.grad_mode,
                           "lr_group": q.lr_group} for k, q in (self.scales or {}).items()},
            "optimizer": None if self.optimizer is None else {
                "t": self.optimizer.t, "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps, "weight_decay": self.optimizer.weight_decay},
            "meta": self.meta,
        }
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"scale.{k}": q.s for k, q in (self.scales or {}).items()})
        if self.optimizer is not None:
            arrays.update(self.optimizer.state_arrays())
        return encode_container(CHECKPOINT_MAGIC, header, arrays)

    def save(self, path) -> Path:
        path = Path(path)
        _write_atomic(path, self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        header, arrays = decode_container(payload, CHECKPOINT_MAGIC)
        cfg = EncoderConfig(**header["encoder"])
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        validate_params(params, cfg)
        plan = LayerBitConfig(header["bit_plan"]) if header["bit_plan"] is not None else None
        scales = None
        if header["scales"]:
            scales = {}
            for k, m in header["scales"].items():
                s = arrays[f"scale.{k}"]
                scales[k] = QuantScale(s.reshape(()) if m["granularity"] == "tensor" else s, m["bits"],
                                       m["granularity"], m["grad_mode"], m["lr_group"])
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = Adam.from_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")}, o["t"],
                                   beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"])
        return cls(cfg, params, plan, scales, opt, header.get("meta", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            payload = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(payload)


# -- packed integer model ----------------------------------------------------------------

_LINEARS = ("qkv", "out", "ffn1", "ffn2")


def packed_arrays(enc: IntegerEncoder) -> tuple[dict, dict[str, np.ndarray]]:
    header = {"kind": "packed", "encoder": enc.cfg.to_dict(), "bit_plan": enc.plan.layers, "act_scales": {}}
    arrays = {f"embed.{k}": v for k, v in enc.embed.items()}
    arrays.update({f"head.{k}": v for k, v in enc.head.items()})
    for i, layer in enumerate(enc.layers):
        for k, v in layer.ln.items():
            arrays[f"l{i}.{k}"] = v
        for name in _LINEARS:
            lin: IntLinear = getattr(layer, name)
            key = f"l{i}.{name}"
            arrays[f"{key}.bias"] = lin.bias
            if lin.precision == "float32":
                arrays[f"{key}.weight"] = lin.weight
            else:
                arrays[f"{key}.packed"] = lin.weight.data
                arrays[f"{key}.row_scales"] = lin.weight.row_scales
                arrays[f"{key}.act_scale"] = np.asarray(lin.act_scale.s, np.float32)
                header["act_scales"][key] = {"bits": lin.act_scale.bits, "cols": lin.weight.cols}
    return header, arrays


def save_packed(enc: IntegerEncoder, path) -> Path:
    header, arrays = packed_arrays(enc)
    path = Path(path)
    _write_atomic(path, encode_container(PACKED_MAGIC, header, arrays))
    return path


def load_packed(path) -> IntegerEncoder:
    """Rebuild an :class:`IntegerEncoder` from packed weights alone (no float GEMM weights needed)."""
    header, arrays = decode_container(Path(path).read_bytes(), PACKED_MAGIC)
    cfg = EncoderConfig(**header["encoder"])
    plan = LayerBitConfig(header["bit_plan"])
    enc = IntegerEncoder.__new__(IntegerEncoder)
    enc.cfg, enc.plan = cfg, plan
    enc.embed = {k[len("embed."):]: v for k, v in arrays.items() if k.startswith("embed.")}
    enc.head = {k[len("head."):]: v for k, v in arrays.items() if k.startswith("head.")}
    enc.layers = []
    for i, precision in enumerate(plan.layers):
        lins = {}
        for name in _LINEARS:
            key = f"l{i}.{name}"
            bias = arrays[f"{key}.bias"]
            if precision == "float32":
                lins[name] = IntLinear(precision, arrays[f"{key}.weight"], bias)
                continue
            meta = header["act_scales"][key]
            data, scales = arrays[f"{key}.packed"], arrays[f"{key}.row_scales"]
            if precision == "int4":
                w = PackedInt4Matrix(data.shape[0], meta["cols"], data, scales)
            else:
                w = Int8Matrix(data.shape[0], meta["cols"], data, scales)
            act = QuantScale(arrays[f"{key}.act_scale"], meta["bits"])
            lins[name] = IntLinear(precision, w, bias, act)
        ln = {k: arrays[f"l{i}.{k}"] for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
        enc.layers.append(IntLayer(**lins, ln=ln, heads=cfg.heads, eps=cfg.ln_eps))
    return enc
