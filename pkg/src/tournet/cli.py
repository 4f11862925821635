"""Command-line entry point: data generation, training, evaluation, sweeps
and plot emission behind one executable.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Progress goes to
stderr; machine-readable results go to files (paths echoed on stdout).
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import bench
from .bench import EvalReport, SweepSpec, compare_runs, curves_from_reports, emit_plot_data
from .decoder import DecodeConfig
from .encoders import ENCODER_KINDS, EncoderConfig
from .model import PolicyModel
from .serialize import ContainerError
from .training import (BASELINES, PARADIGMS, TrainConfig, TrainingDiverged, save_checkpoint, train)
from .tsp import (BRUTE_FORCE_MAX, DatasetFormatError, HELD_KARP_MAX, SOLVERS,
                  generate_dataset, read_dataset, write_dataset)


class UsageError(ValueError):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# config files: INI sections mirroring the dataclass configs


_TRAIN_KEYS = {f.name for f in dc_fields(TrainConfig)} - {"encoder"}
_ENCODER_KEYS = {f.name for f in dc_fields(EncoderConfig)}
_DECODE_KEYS = {f.name for f in dc_fields(DecodeConfig)}
_SWEEP_KEYS = {"sizes", "count", "decode", "seed", "exact_only"}
_SECTIONS = {"train": _TRAIN_KEYS, "encoder": _ENCODER_KEYS,
             "decode": _DECODE_KEYS, "sweep": _SWEEP_KEYS}


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Sectioned key-value file; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    out: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise UsageError(f"{path}: unknown config section [{section}]")
        allowed = _SECTIONS[section]
        for key, value in cp.items(section):
            if key not in allowed:
                raise UsageError(f"{path}: unknown key {key!r} in section [{section}]")
            out.setdefault(section, {})[key] = value
    return out


def write_config_ini(path, sections: dict[str, dict]) -> None:
    lines = []
    for section, kv in sections.items():
        lines.append(f"[{section}]")
        for key, value in kv.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def parse_decode_spec(spec: str, seed: int = 0, clip: float = 10.0) -> DecodeConfig:
    """Decode grammar: ``greedy``, ``sample:K`` or ``beam:W``."""
    spec = spec.strip()
    if spec == "greedy":
        return DecodeConfig(mode="greedy", seed=seed, clip=clip)
    for mode, key in (("sample", "k"), ("beam", "width")):
        if spec.startswith(mode + ":"):
            try:
                budget = int(spec.split(":", 1)[1])
            except ValueError:
                raise UsageError(f"bad decode spec {spec!r}: budget must be an integer") from None
            if budget < 1:
                raise UsageError(f"bad decode spec {spec!r}: budget must be >= 1")
            return DecodeConfig(mode=mode, seed=seed, clip=clip, **{key: budget})
    raise UsageError(f"bad decode spec {spec!r}: expected greedy, sample:K or beam:W")


def _coerce(value: str, target_type, key: str):
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError:
        raise UsageError(f"bad value {value!r} for {key}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    if args.size < 2:
        raise UsageError("--size must be >= 2")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.solve == "bruteforce" and args.size > BRUTE_FORCE_MAX:
        raise UsageError(f"bruteforce solves up to n={BRUTE_FORCE_MAX}; use heldkarp or twoopt")
    if args.solve == "heldkarp" and args.size > HELD_KARP_MAX:
        raise UsageError(f"heldkarp solves up to n={HELD_KARP_MAX}; use twoopt")
    _say(f"generating {args.count} instances of size {args.size} (solver: {args.solve})")
    ds = generate_dataset(args.size, args.count, args.seed, args.solve)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(out)
    return 0


def _encoder_from(args, file_cfg: dict) -> EncoderConfig:
    enc = dict(file_cfg.get("encoder", {}))
    for key in _ENCODER_KEYS:
        flag = getattr(args, f"enc_{key}", None)
        if flag is not None:
            enc[key] = flag
    defaults = {"kind": "gat", "layers": 2, "embed_dim": 64, "heads": 4, "ff_dim": 256}
    merged = {}
    for key, default in defaults.items():
        raw = enc.get(key, default)
        merged[key] = _coerce(raw, type(default), f"encoder.{key}") if isinstance(raw, str) else raw
    try:
        return EncoderConfig(**merged)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_config_from(args, file_cfg: dict) -> TrainConfig:
    encoder = _encoder_from(args, file_cfg)
    values: dict = dict(file_cfg.get("train", {}))
    for key in _TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    merged = {}
    for f in dc_fields(TrainConfig):
        if f.name == "encoder" or f.name not in values:
            continue
        raw = values[f.name]
        if isinstance(raw, str):
            target = {"paradigm": str, "baseline": str, "name": str, "lr": float,
                      "val_every": int}.get(f.name, int)
            raw = _coerce(raw, target, f"train.{f.name}")
        merged[f.name] = raw
    if merged.get("val_every") is not None and merged["val_every"] <= 0:
        merged["val_every"] = None
    try:
        return TrainConfig(encoder=encoder, **merged)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = _train_config_from(args, file_cfg)
    data = None
    if cfg.paradigm == "sl":
        if not args.data:
            raise UsageError("supervised training needs --data with reference tours")
        data = read_dataset(args.data)
        if data.solutions is None:
            raise UsageError(f"{args.data} has no reference tours; regenerate with --solve")
    elif args.data:
        _say("note: --data is ignored for RL (instances are generated on the fly)")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    sections = {"train": {k: v for k, v in cfg.to_dict().items() if k != "encoder" and v is not None},
                "encoder": cfg.encoder.to_dict()}
    write_config_ini(outdir / "config.ini", sections)
    result = train(cfg, data, progress=_say)
    ckpt = outdir / "model.ckpt"
    save_checkpoint(ckpt, result)
    result.log.to_csv(outdir / "trainlog.csv")
    if result.final_val_gap is not None:
        _say(f"final greedy validation gap: {result.final_val_gap:.3f}%")
    print(ckpt)
    return 0


def _load_model(path) -> PolicyModel:
    try:
        return PolicyModel.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {path} does not exist") from None


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    dataset = read_dataset(args.data)
    decode = parse_decode_spec(args.decode, seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_ini(outdir / "config.ini", {
        "eval": {"model": args.model, "data": args.data, "decode": decode.tag(),
                 "seed": args.seed, "workers": args.workers, "exact_only": args.exact_only}})
    row = bench.evaluate(model, dataset, decode, exact_only=args.exact_only, workers=args.workers)
    report = EvalReport([row])
    report.to_csv(outdir / "report.csv")
    _say(f"size {row.size} {row.decode}: mean len {row.mean_len:.4f}, "
         f"gap {row.mean_gap_pct:.3f}% ({row.ref}), {row.seconds:.1f}s")
    print(outdir / "report.csv")
    return 0


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad --sizes {text!r}: expected comma-separated integers") from None
    if not sizes:
        raise UsageError("--sizes is empty")
    return sizes


def cmd_sweep(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    sweep_cfg = dict(file_cfg.get("sweep", {}))
    sizes = _parse_sizes(args.sizes if args.sizes is not None else sweep_cfg.get("sizes", ""))
    count = args.count if args.count is not None else int(sweep_cfg.get("count", 1000))
    seed = args.seed if args.seed is not None else int(sweep_cfg.get("seed", 0))
    decode_text = args.decode if args.decode is not None else sweep_cfg.get("decode", "greedy")
    exact_only = args.exact_only or _coerce(str(sweep_cfg.get("exact_only", "false")), bool, "sweep.exact_only")
    decodes = tuple(parse_decode_spec(s, seed=seed) for s in decode_text.split(","))
    model = _load_model(args.model)
    try:
        spec = SweepSpec(sizes=sizes, count=count, decodes=decodes, seed=seed, exact_only=exact_only)
    except ValueError as e:
        raise UsageError(str(e)) from None
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_ini(outdir / "config.ini", {
        "sweep": {"sizes": ",".join(map(str, sizes)), "count": count, "seed": seed,
                  "decode": ",".join(d.tag() for d in decodes), "exact_only": exact_only,
                  "model": args.model}})
    report = bench.generalization_sweep(model, spec, workers=args.workers, progress=_say)
    report.to_csv(outdir / "report.csv")
    print(outdir / "report.csv")
    return 0


def cmd_plot(args) -> int:
    reports = [EvalReport.from_csv(p) for p in args.reports]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_ini(outdir / "config.ini", {"plot": {"reports": ",".join(args.reports)}})
    curves = curves_from_reports(reports)
    written = emit_plot_data(curves, outdir)
    if len(reports) > 1:
        cmp_path = outdir / "comparison.csv"
        compare_runs(reports).to_csv(cmp_path)
        written.append(str(cmp_path))
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tournet",
                                description="neural TSP solvers: train, evaluate and compare")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset file of random instances")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--solve", choices=SOLVERS, default="none")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a policy (SL needs labelled --data)")
    t.add_argument("--paradigm", choices=PARADIGMS)
    t.add_argument("--baseline", choices=BASELINES)
    t.add_argument("--encoder", dest="enc_kind", choices=ENCODER_KINDS)
    t.add_argument("--layers", dest="enc_layers", type=int)
    t.add_argument("--embed-dim", dest="enc_embed_dim", type=int)
    t.add_argument("--heads", dest="enc_heads", type=int)
    t.add_argument("--ff-dim", dest="enc_ff_dim", type=int)
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--size", dest="graph_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--epoch-size", dest="epoch_size", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--val-size", dest="val_size", type=int)
    t.add_argument("--val-every", dest="val_every", type=int)
    t.add_argument("--name")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--decode", default="greedy", help="greedy, sample:K or beam:W")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    e.add_argument("--exact-only", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate a checkpoint across sizes")
    s.add_argument("--model", required=True)
    s.add_argument("--sizes", help="comma-separated, strictly increasing")
    s.add_argument("--count", type=int)
    s.add_argument("--decode", help="comma-separated decode specs")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.add_argument("--exact-only", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="emit curves, charts and a comparison table from reports")
    pl.add_argument("--reports", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        _say(f"usage error: {e}")
        return 2
    except (TrainingDiverged, DatasetFormatError, bench.BenchError, ContainerError, OSError) as e:
        _say(f"error: {e}")
        return 1
    except ValueError as e:
        _say(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
