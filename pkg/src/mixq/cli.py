"""``mixq`` command line: finetune, calibrate, qat, eval, pack, bench, pipeline, sweep."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .config import RunConfig, load_config
from .data import ToyDataset, load_tsv, load_vocab, make_synthetic
from .errors import CheckpointError, ConfigError, ContractError, MixqError, TrainingDiverged
from .kernels import BenchReport, IntegerEncoder, bench_gemm, bench_layer
from .model import LayerBitConfig, init_params
from .trainer import (
    ACT_SCALE_LR_GRID,
    QAT_WEIGHT_LR_GRID,
    WEIGHT_SCALE_LR_GRID,
    Teacher,
    compression_ratio,
    finetune,
    layer_gemm_weights,
    predict,
    qat,
    run_calibration,
)

log = logging.getLogger("mixq")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 1, 2, 3, 4

FINETUNE_CKPT = "finetune.ckpt"
CALIBRATED_CKPT = "calibrated.ckpt"
QAT_CKPT = "qat.ckpt"
PACKED_FILE = "model.mxqp"


# -- io helpers ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, obj) -> None:
    ckio._write_atomic(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


def write_csv(path: Path, rows: list[dict], columns) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c) for c in columns})
    ckio._write_atomic(path, buf.getvalue().encode())


class JsonlSink:
    """Buffers metric records and flushes them as JSON lines."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []

    def __call__(self, rec: dict) -> None:
        self.records.append(_jsonable(rec))

    def flush(self) -> None:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
        ckio._write_atomic(self.path, text.encode())


# -- data -------------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> dict[str, ToyDataset]:
    d, m = cfg.data, cfg.model
    if d.kind == "synthetic":
        full = make_synthetic(d.num_examples, m.max_seq_len, m.vocab_size, d.seed, d.task, m.num_classes,
                              d.min_len, d.label_noise)
        if d.task == "order" and m.num_classes != 2:
            raise ConfigError("invalid config key 'model.num_classes': the order task has 2 classes")
    else:
        if not d.path or not d.vocab:
            raise ConfigError("invalid config key 'data.path': csv data needs data.path and data.vocab")
        try:
            vocab = load_vocab(d.vocab)
        except OSError as e:
            raise ConfigError(f"cannot read vocabulary {d.vocab}: {e}") from e
        if max(vocab.values(), default=1) >= m.vocab_size:
            raise ConfigError("invalid config key 'model.vocab_size': smaller than the vocabulary file")
        full = load_tsv(d.path, vocab, m.max_seq_len, m.num_classes)
    parts = full.split(d.split, d.seed)
    for name in ("train", "dev"):
        if len(parts.get(name, ())) == 0:
            raise ConfigError(f"dataset split '{name}' is empty")
    return parts


# -- commands ---------------------------------------------------------------------------

def cmd_finetune(cfg: RunConfig, out: Path | None = None) -> Path:
    data = load_data(cfg)
    out = out or cfg.output_path()
    params = init_params(cfg.model, cfg.train.seed)
    sink = JsonlSink(out / "finetune_metrics.jsonl")
    try:
        best, acc, opt = finetune(params, cfg.model, cfg.train, data["train"], data["dev"], sink)
    finally:
        sink.flush()
    log.info("finetune: best dev accuracy %.4f", acc)
    ck = ckio.Checkpoint(cfg.model, best, None, None, opt, {"phase": "finetune", "dev_accuracy": acc})
    return ck.save(out / FINETUNE_CKPT)


def _load_ckpt(path: Path) -> ckio.Checkpoint:
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return ckio.Checkpoint.load(path)


def _check_model(cfg: RunConfig, ck: ckio.Checkpoint) -> None:
    if ck.config != cfg.model:
        raise ConfigError("checkpoint model shape does not match the 'model' section of the config")


def cmd_calibrate(cfg: RunConfig, ckpt: Path, out: Path | None = None) -> Path:
    ck = _load_ckpt(ckpt)
    _check_model(cfg, ck)
    data = load_data(cfg)
    out = out or cfg.output_path()
    plan = cfg.train.plan_for(cfg.model.layers)
    qs, warnings = run_calibration(ck.params, cfg.model, plan, data["train"], cfg.train.calib_steps,
                                   cfg.train.calib_batch_size, cfg.train.grad_mode, cfg.train.calib_literal_max,
                                   cfg.train.seed)
    sink = JsonlSink(out / "calibration.jsonl")
    for rec in warnings:
        sink(rec)
    for key, q in sorted(qs.items()):
        s = np.atleast_1d(q.s)
        sink({"event": "scale", "tensor": key, "bits": q.bits, "granularity": q.granularity,
              "min": float(s.min()), "max": float(s.max()), "mean": float(s.mean()), "positive": bool((s > 0).all())})
    sink.flush()
    meta = dict(ck.meta, phase="calibrate")
    return ckio.Checkpoint(cfg.model, ck.params, plan, qs, None, meta).save(out / CALIBRATED_CKPT)


def _teacher(path: Path | None, fallback: ckio.Checkpoint) -> Teacher:
    if path is None:
        return Teacher(fallback.params, fallback.config)
    t = _load_ckpt(path)
    if t.bit_plan is not None and any(p != "float32" for p in t.bit_plan.layers):
        log.warning("teacher checkpoint has a quantized plan; its float weights are used")
    return Teacher(t.params, t.config)


def cmd_qat(cfg: RunConfig, ckpt: Path, teacher: Path | None = None, out: Path | None = None,
            use_teacher: bool = True) -> Path:
    ck = _load_ckpt(ckpt)
    _check_model(cfg, ck)
    if ck.bit_plan is None or ck.scales is None:
        raise CheckpointError(f"{ckpt} has no quantization scales; run calibrate first")
    data = load_data(cfg)
    out = out or cfg.output_path()
    t = _teacher(teacher, ck) if use_teacher and cfg.distill.active else None
    if t is not None and t.cfg.heads != cfg.model.heads:
        raise ContractError(f"teacher has {t.cfg.heads} heads, student {cfg.model.heads}")
    sink = JsonlSink(out / "qat_metrics.jsonl")
    try:
        best_p, best_q, acc, opt = qat(ck.params, ck.scales, cfg.model, ck.bit_plan, cfg.train,
                                       data["train"], data["dev"], t, sink)
    except TrainingDiverged as e:
        sink(e.record)
        write_json(out / "diagnostic.json", e.record)
        raise
    finally:
        sink.flush()
    log.info("qat: best dev accuracy %.4f", acc)
    meta = dict(ck.meta, phase="qat", dev_accuracy=acc)
    return ckio.Checkpoint(cfg.model, best_p, ck.bit_plan, best_q, opt, meta).save(out / QAT_CKPT)


def parse_plan(text: str) -> LayerBitConfig:
    return LayerBitConfig([p.strip() for p in text.split(",") if p.strip()])


def cmd_eval(cfg: RunConfig, ckpt: Path, mode: str = "fake-quant", split: str = "dev",
             plan: LayerBitConfig | None = None, out: Path | None = None) -> dict:
    ck = _load_ckpt(ckpt)
    _check_model(cfg, ck)
    parts = load_data(cfg)
    if split not in parts or len(parts[split]) == 0:
        raise ConfigError(f"dataset split '{split}' is empty or not configured")
    data = parts[split]
    plan = plan or ck.bit_plan or LayerBitConfig.float32(cfg.model.layers)
    quantized = any(p != "float32" for p in plan.layers)
    if quantized and ck.scales is None:
        raise ConfigError(f"plan {plan.layers} is quantized but {ckpt} has no scales")
    fq = predict(ck.params, cfg.model, data, plan, ck.scales)
    report = {"checkpoint": str(ckpt), "split": split, "examples": len(data), "plan": plan.layers,
              "mode": mode, "fake_quant_accuracy": float((fq == data.labels).mean())}
    if mode == "integer":
        enc = IntegerEncoder(ck.params, cfg.model, plan, ck.scales)
        ip = enc.predict(data.tokens, data.mask)
        report["integer_accuracy"] = float((ip == data.labels).mean())
        report["agreement"] = float((ip == fq).mean())
    report["accuracy"] = report["integer_accuracy"] if mode == "integer" else report["fake_quant_accuracy"]
    out = out or cfg.output_path()
    write_json(out / f"eval_{mode}_{split}.json", report)
    return report


def cmd_pack(cfg: RunConfig, ckpt: Path, out: Path | None = None) -> dict:
    ck = _load_ckpt(ckpt)
    if ck.bit_plan is None or ck.scales is None:
        raise CheckpointError(f"{ckpt} is not a quantized checkpoint; run calibrate first")
    enc = IntegerEncoder(ck.params, ck.config, ck.bit_plan, ck.scales)
    out = out or cfg.output_path()
    path = ckio.save_packed(enc, out / PACKED_FILE)
    float_bytes = 4 * layer_gemm_weights(ck.config) * ck.config.layers
    report = {
        "packed_file": str(path),
        "plan": ck.bit_plan.layers,
        "compression_ratio": round(compression_ratio(ck.bit_plan, ck.config), 2),
        "compression_ratio_exact": compression_ratio(ck.bit_plan, ck.config),
        "gemm_weight_bytes": enc.weight_bytes,
        "gemm_weight_bytes_float32": float_bytes,
        "float_layers": [i for i, p in enumerate(ck.bit_plan.layers) if p == "float32"],
    }
    if report["float_layers"]:
        report["note"] = "float32 layers are stored unquantized and count 32 bits per weight"
    write_json(out / "pack_report.json", report)
    return report


def cmd_bench(cfg: RunConfig, out: Path | None = None) -> BenchReport:
    b = cfg.bench
    report = BenchReport()
    for batch, vt in zip(b.batches, b.valid_tokens):
        for prec in b.precisions:
            row = bench_layer(cfg.model, prec, batch, vt, b.rounds, b.warmup, b.seed)
            log.info("layer batch=%d tokens=%d %s: %.1f us", batch, vt, prec, row.mean_us)
            report.rows.append(row)
    report.fill_speedups()
    for size in b.gemm_sizes:
        for prec in ("float32", "int8", "int4"):
            report.gemm.append(bench_gemm(size, prec, b.gemm_rounds, 2, b.seed))
    out = out or cfg.output_path()
    d = report.to_dict()
    write_json(out / "bench.json", d)
    write_csv(out / "bench_rows.csv", d["rows"], BenchReport.ROW_COLUMNS)
    write_csv(out / "bench_table.csv", d["table"], BenchReport.TABLE_COLUMNS)
    write_csv(out / "bench_gemm.csv", d["gemm"], ("size", "precision", "mean_us", "std_us", "rounds"))
    return report


def cmd_pipeline(cfg: RunConfig, out: Path | None = None) -> dict:
    out = out or cfg.output_path()
    load_data(cfg)  # fail before anything is written
    ft = cmd_finetune(cfg, out)
    cal = cmd_calibrate(cfg, ft, out)
    q = cmd_qat(cfg, cal, None, out)
    return cmd_pack(cfg, q, out)


def cmd_sweep(cfg: RunConfig, ckpt: Path, out: Path | None = None) -> dict:
    """QAT over the learning-rate grids; keeps the run with the best dev accuracy."""
    ck = _load_ckpt(ckpt)
    _check_model(cfg, ck)
    if ck.scales is None:
        raise CheckpointError(f"{ckpt} has no quantization scales; run calibrate first")
    data = load_data(cfg)
    out = out or cfg.output_path()
    t = Teacher(ck.params, ck.config) if cfg.distill.active else None
    sink = JsonlSink(out / "sweep.jsonl")
    best = None
    for lw, la, ls in itertools.product(QAT_WEIGHT_LR_GRID, ACT_SCALE_LR_GRID, WEIGHT_SCALE_LR_GRID):
        tc = cfg.train.__class__(**{**cfg.train.__dict__, "lr_weight": lw, "lr_act_scale": la,
                                    "lr_weight_scale": ls})
        p, q, acc, _ = qat(ck.params, ck.scales, cfg.model, ck.bit_plan, tc, data["train"], data["dev"], t)
        sink({"lr_weight": lw, "lr_act_scale": la, "lr_weight_scale": ls, "dev_accuracy": acc})
        if best is None or acc > best[0]:
            best = (acc, p, q, (lw, la, ls))
    sink.flush()
    acc, p, q, lrs = best
    ckio.Checkpoint(cfg.model, p, ck.bit_plan, q, None, dict(ck.meta, phase="sweep", dev_accuracy=acc)).save(
        out / "sweep_best.ckpt")
    result = {"dev_accuracy": acc, "lr_weight": lrs[0], "lr_act_scale": lrs[1], "lr_weight_scale": lrs[2]}
    write_json(out / "sweep_best.json", result)
    return result


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="YAML run config")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. train.grad_mode=STE")
    common.add_argument("-o", "--output-dir", type=Path, help="overrides output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mixq", description="Mixed int4/int8 quantization-aware training toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("finetune", parents=[common], help="train the float32 model")
    for name, default, help_ in (("calibrate", FINETUNE_CKPT, "initialize quantization scales"),
                                 ("qat", CALIBRATED_CKPT, "quantization-aware training"),
                                 ("sweep", CALIBRATED_CKPT, "QAT over the learning-rate grids")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--checkpoint", type=Path, help=f"input checkpoint (default: <output_dir>/{default})")
        if name == "qat":
            sp.add_argument("--teacher", type=Path, help="teacher checkpoint (default: the input's float weights)")
            sp.add_argument("--no-teacher", action="store_true", help="disable distillation")
    sp = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    sp.add_argument("--checkpoint", type=Path, help=f"default: <output_dir>/{QAT_CKPT}")
    sp.add_argument("--mode", choices=("fake-quant", "integer"), default="fake-quant")
    sp.add_argument("--split", default="dev")
    sp.add_argument("--plan", type=parse_plan, help="comma separated precisions, e.g. int8,int8,int4,int4")
    sp = sub.add_parser("pack", parents=[common], help="write packed integer weights")
    sp.add_argument("--checkpoint", type=Path, help=f"default: <output_dir>/{QAT_CKPT}")
    sub.add_parser("bench", parents=[common], help="layer and GEMM latency report")
    sub.add_parser("pipeline", parents=[common], help="finetune, calibrate, qat and pack in one go")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = args.output_dir or cfg.output_path()
        ck = getattr(args, "checkpoint", None)
        cmd = args.command
        if cmd == "finetune":
            result = {"checkpoint": str(cmd_finetune(cfg, out))}
        elif cmd == "calibrate":
            result = {"checkpoint": str(cmd_calibrate(cfg, ck or out / FINETUNE_CKPT, out))}
        elif cmd == "qat":
            result = {"checkpoint": str(cmd_qat(cfg, ck or out / CALIBRATED_CKPT, args.teacher, out,
                                                use_teacher=not args.no_teacher))}
        elif cmd == "eval":
            result = cmd_eval(cfg, ck or out / QAT_CKPT, args.mode, args.split, args.plan, out)
        elif cmd == "pack":
            result = cmd_pack(cfg, ck or out / QAT_CKPT, out)
        elif cmd == "bench":
            rep = cmd_bench(cfg, out)
            result = {"table": rep.table(), "gemm": rep.gemm, "reference": rep.reference}
        elif cmd == "sweep":
            result = cmd_sweep(cfg, ck or out / CALIBRATED_CKPT, out)
        else:
            result = cmd_pipeline(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except MixqError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
