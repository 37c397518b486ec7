"""Command-line entry point: ``avvp {synth,train,eval,ablate,verify}``.

Settings come from an optional ``key = value`` file (``--config``), then the
dedicated flags, then ``key=value`` overrides on the command line; later
sources win. Every key is checked against :data:`SCHEMA`.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checks import run_verify
from .data import SynthConfig, generate_synthetic, pack_label_bits, read_dataset, write_dataset
from .errors import ConfigError, FormatError, NumericError
from .experiments import format_table, grid, predict_dataset, run_cell, summarize
from .metrics import BinaryParse, binarize, evaluate
from .model import VARIANTS, ModelConfig
from .train import (
    TrainConfig,
    compute_pseudo_labels,
    format_log_line,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage3,
)

log = logging.getLogger("avvp")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _schema() -> dict[str, tuple]:
    """key -> (parser, default)."""
    out: dict[str, tuple] = {}
    for cls in (ModelConfig, TrainConfig, SynthConfig):
        for f in fields(cls):
            out.setdefault(f.name, (type(f.default), f.default))
    out.update(
        data=(str, "data"),
        out=(str, None),
        checkpoint=(str, None),
        theta=(float, 0.5),
        stages=(_int_list, [1, 2, 3]),
        variants=(_str_list, ["full", "no_msg"]),
        seeds=(_int_list, [0]),
        mus=(_float_list, []),
        Ns=(_int_list, []),
        n_as=(_int_list, []),
        n_vs=(_int_list, []),
        n_train=(int, 0),
    )
    return out


SCHEMA = _schema()


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"bad value {text.strip()!r} for {key}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = parse_value(key, value)
    return out


def resolve(args) -> dict:
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for flag in ("seed", "variant", "out"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[flag] = val
    if getattr(args, "stages", None) is not None:
        cfg["stages"] = parse_value("stages", args.stages)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), value)
    return cfg


def _pick(cls, cfg):
    return cls(**{f.name: cfg[f.name] for f in fields(cls)})


def model_config(cfg) -> ModelConfig:
    return _pick(ModelConfig, cfg)


def train_config(cfg) -> TrainConfig:
    tc = _pick(TrainConfig, cfg)
    tc.validate()
    return tc


def synth_config(cfg) -> SynthConfig:
    sc = _pick(SynthConfig, cfg)
    sc.validate()
    return sc


def _out_dir(cfg, default: str) -> Path:
    out = Path(cfg["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg):
    path = Path(cfg["data"])
    if not (path / "manifest.jsonl").exists():
        raise FormatError(f"no dataset at {path} (manifest.jsonl missing)")
    return read_dataset(path)


def _dump_config(cfg, path: Path) -> None:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        if v is not None:
            lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


# -- commands ---------------------------------------------------------------------


def cmd_synth(cfg) -> int:
    sc = synth_config(cfg)
    out = _out_dir(cfg, cfg["data"])
    try:
        ds = generate_synthetic(sc)
        write_dataset(ds.samples, out)
    except OSError as exc:
        print(f"error: cannot write dataset to {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    summary = ds.summary()
    text = "\n".join(f"{k} {v:.6g}" if isinstance(v, float) else f"{k} {v}" for k, v in summary.items())
    (out / "summary.txt").write_text(text + "\n")
    print(f"wrote {len(ds.samples)} videos to {out}")
    print(text)
    return EXIT_OK


def _write_pseudo(pseudo, path: Path) -> None:
    with open(path, "w") as fh:
        for sid in sorted(pseudo):
            ya, yv = pseudo[sid]
            fh.write(json.dumps({"id": sid, "Y_a": pack_label_bits(ya), "Y_v": pack_label_bits(yv)}) + "\n")


def cmd_train(cfg) -> int:
    mc, tc = model_config(cfg), train_config(cfg)
    stages = set(cfg["stages"])
    if not stages or not stages <= {1, 2, 3}:
        raise ConfigError(f"stages must be drawn from 1,2,3; got {cfg['stages']}")
    samples = _load_data(cfg)
    out = _out_dir(cfg, "run")
    _dump_config(cfg, out / "config.txt")
    log_lines: list[str] = []
    cp1 = train_stage1(samples, mc, tc)
    save_checkpoint(cp1, out / "stage1.ckpt")
    log_lines += [format_log_line(r) for r in cp1.history]
    if stages & {2, 3}:
        pseudo = compute_pseudo_labels(cp1, samples, tc.tau)
        _write_pseudo(pseudo, out / "pseudo_labels.jsonl")
        print(f"note: pseudo labels from a confidence threshold (tau={tc.tau}) on stage-1 predictions")
        if 3 in stages:
            cp3 = train_stage3(samples, pseudo, mc, tc)
            save_checkpoint(cp3, out / "stage3.ckpt")
            log_lines += [format_log_line(r) for r in cp3.history]
    (out / "train.log").write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
    print(f"wrote checkpoints and train.log to {out}")
    return EXIT_OK


def _oracle_predictions(samples):
    return [BinaryParse(s.gt_audio.astype(np.uint8), s.gt_visual.astype(np.uint8)) for s in samples]


def cmd_eval(cfg, oracle: bool = False) -> int:
    samples = _load_data(cfg)
    missing = [s.id for s in samples if not s.has_ground_truth]
    if missing:
        print(f"error: {len(missing)} videos lack ground truth (first: {missing[0]}); evaluation needs it", file=sys.stderr)
        return EXIT_USAGE
    if oracle:
        parses = _oracle_predictions(samples)
    else:
        if not cfg["checkpoint"]:
            raise ConfigError("eval needs checkpoint=<path> (or --oracle)")
        model = load_checkpoint(cfg["checkpoint"]).model()
        parses = [binarize(p, cfg["theta"]) for p in predict_dataset(model, samples)]
    report = evaluate(parses, [(s.gt_audio, s.gt_visual) for s in samples], cfg["theta"])
    if oracle:
        report.notes.append("oracle predictions (ground truth copied); debug only")
    out = _out_dir(cfg, "eval")
    (out / "report.txt").write_text(report.to_table() + "\n")
    (out / "report.records").write_text("\n".join(report.to_records()) + "\n")
    print(report.to_table())
    return EXIT_OK


def _ablation_records(rows) -> list[str]:
    lines = []
    for r in rows:
        parts = [f"{k}={'-' if v is None else v}" for k, v in r.items()]
        lines.append(" ".join(parts))
    return lines


def cmd_ablate(cfg) -> int:
    samples = _load_data(cfg)
    n_train = cfg["n_train"] or int(round(0.6 * len(samples)))
    if not 0 < n_train < len(samples):
        raise ConfigError(f"n_train={n_train} must leave both a train and a test split of {len(samples)} videos")
    train_set, test_set = samples[:n_train], samples[n_train:]
    opt = lambda key: cfg[key] or [None]
    cells_spec = grid(cfg["variants"], cfg["seeds"], opt("mus"), opt("Ns"), opt("n_as"), opt("n_vs"))
    if not cells_spec:
        print("error: empty ablation grid (need at least one variant and one seed)", file=sys.stderr)
        return EXIT_USAGE
    for v in cfg["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    mc, tc = model_config(cfg), train_config(cfg)
    cells = []
    for i, (variant, mu, N, n_a, n_v, seed) in enumerate(cells_spec, 1):
        log.info("cell %d/%d", i, len(cells_spec))
        cells.append(run_cell(train_set, test_set, mc, tc, variant, seed, mu, N, n_a, n_v))
    rows = summarize(cells)
    out = _out_dir(cfg, "ablate")
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.records").write_text("\n".join(_ablation_records(rows)) + "\n")
    print(table)
    return EXIT_OK


def cmd_verify(cfg, inject_fault: str | None = None) -> int:
    if inject_fault is not None and inject_fault not in tn.backward_rule_names():
        print(f"error: no backward rule {inject_fault!r}; known: {', '.join(tn.backward_rule_names())}", file=sys.stderr)
        return EXIT_USAGE
    if inject_fault:
        print(f"fault injected into backward rule '{inject_fault}'")
    results = run_verify(inject_fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        blame = f" (injected fault in '{inject_fault}')" if inject_fault else ""
        print(f"verify FAILED{blame}: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"verify passed: {len(results)} checks")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--stages", help="comma-separated subset of 1,2,3")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log each epoch to stderr")
    common.add_argument("overrides", nargs="*", metavar="key=value")

    ap = argparse.ArgumentParser(prog="avvp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="three-stage training")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--oracle", action="store_true", help="debug: score ground truth against itself")
    sub.add_parser("ablate", parents=[common], help="variant/hyperparameter grid")
    p = sub.add_parser("verify", parents=[common], help="gradient, metric and format self-checks")
    p.add_argument("--inject-fault", metavar="OP", help="debug: corrupt one backward rule")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, oracle=args.oracle)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_verify(cfg, args.inject_fault)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
