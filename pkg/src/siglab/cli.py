"""Command-line entry point: ``siglab {verify,train,sweep,chunk-bench}``.

Configs are plain ``key = value`` lines with ``#`` comments; every key is a
:class:`~siglab.harness.RunConfig` field. ``--set key=value`` overrides
the file and may repeat. The effective config is echoed into the output
directory as ``config.txt`` and can be fed back with ``--config``.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from .chunked import STRATEGIES, bench_record
from .errors import ConfigError
from .harness import SWEEP_AXES, RunConfig, run, sweep
from .model import save_checkpoint
from .verify import run_checks

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "SIGLAB_OUT"


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}", key) from None
    return text


def parse_pairs(lines, source="<config>") -> dict:
    """``key = value`` lines into a dict of raw strings; later keys win."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(config_path=None, overrides=()) -> RunConfig:
    pairs = {}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            pairs.update(parse_pairs(fh, str(config_path)))
    pairs.update(parse_pairs(overrides, "--set"))
    defaults = RunConfig()
    known = set(RunConfig.keys())
    for key in pairs:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}", key)
    values = {k: _parse_value(k, v, getattr(defaults, k)) for k, v in pairs.items()}
    return RunConfig(**values)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    lines = ["# effective configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def write_csv(path, rows):
    fields = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get(OUT_ENV) or "siglab_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_verify(args) -> int:
    results = run_checks(args.perturb_bias_grad)
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out_dir:
        out = _out_dir(args)
        rows = [{"check": n, "ok": ok, "detail": d} for n, ok, d in results]
        write_csv(out / "verify.csv", rows)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args.config, args.set)
    out = _out_dir(args)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    result, report = run(cfg)
    with open(out / "trace.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in result.trace:
            fh.write(_dump_json(rec) + "\n")
    row = report.row()
    row["corruption_counts"] = result.corruption_counts
    (out / "eval.json").write_text(_dump_json(row) + "\n", encoding="utf-8")
    save_checkpoint(result.model, out / "checkpoint.json", result.groups)
    print(f"recall@1 {report.recall_at_1:.4f}  zero-shot {report.zero_shot_accuracy:.4f}  -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args.config, args.set)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}", "axis")
    out = _out_dir(args)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    values = [v for v in args.values.split(",") if v]
    losses = [v for v in args.losses.split(",") if v] if args.losses else None
    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = sweep(cfg, args.axis, values, losses=losses, seeds=seeds)
    write_csv(out / "results.csv", rows)
    print(f"{len(rows)} runs -> {out / 'results.csv'}")
    return EXIT_OK


def cmd_chunk_bench(args) -> int:
    out = _out_dir(args)
    ns = [int(v) for v in args.n.split(",")]
    ds = [int(v) for v in args.devices.split(",")]
    rows = []
    for n in ns:
        for D in ds:
            for strategy in STRATEGIES:
                rec = bench_record(strategy, n, D, args.dim)
                rows.append({k: rec[k] for k in ("n", "D", "b", "strategy", "peak_entries",
                                                 "floats_transferred", "grad_floats_transferred", "permutes")})
    write_csv(out / "chunk_bench.csv", rows)
    print(f"{len(rows)} rows -> {out / 'chunk_bench.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siglab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./siglab_out)")
        if config:
            sp.add_argument("--config", default=None, help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, repeatable")

    v = sub.add_parser("verify", help="run the oracle checks")
    v.add_argument("--out-dir", default=None)
    v.add_argument("--perturb-bias-grad", type=float, default=0.0, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one run, write trace.jsonl, eval.json, checkpoint.json")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="sweep one axis, write results.csv")
    common(s)
    s.add_argument("--axis", required=True, help="/".join(SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--losses", default="", help="comma-separated, default: the config's loss")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("chunk-bench", help="memory/communication counters per (n, D, strategy)")
    common(c, config=False)
    c.add_argument("--n", default="256")
    c.add_argument("--devices", default="1,2,4,8")
    c.add_argument("--dim", type=int, default=16)
    c.set_defaults(func=cmd_chunk_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if getattr(exc, "key", None) else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
