"""Command-line entry point: synth, preprocess, train, evaluate, ablate, explain, detect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical instability.
Every randomised step draws from ``--seed`` via :func:`canguard.seeding.derive_seed`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import explain as explain_mod
from . import stream as stream_mod
from .autodiff import NumericalInstabilityError
from .ingest import IngestError, SynthConfig, parse_counts, parse_csv, serialize_csv, synthesize
from .model import CheckpointError, ModelConfig, build, load, save
from .preprocess import ClassWeights, PreparedData, Scaler, load_dataset, prepare, save_dataset
from .seeding import derive_seed
from .training import TrainConfig, evaluate, render_ablation_table, run_ablation, train

log = logging.getLogger("canguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _emit(args, obj: dict, text: str) -> None:
    print(json.dumps(obj, sort_keys=True, default=float) if args.format == "json" else text)


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(args, T: int) -> ModelConfig:
    cfg = ModelConfig(T=T, seed=derive_seed(args.seed, "init"), single_pool=args.ablation_switch == "single_pool")
    if args.conv_filters:
        cfg.conv_filters = _int_list(args.conv_filters)
    if args.gru_units:
        cfg.gru_units = _int_list(args.gru_units)
    if args.dense_units:
        cfg.dense_units = _int_list(args.dense_units)
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(seed=derive_seed(args.seed, "train"))
    if args.epochs is not None:
        cfg.max_epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.patience is not None:
        cfg.early_stop_patience = args.patience
    cfg.early_stop_patience = min(cfg.early_stop_patience, max(cfg.max_epochs, 1))
    return cfg


def _load_prepared(directory: str) -> tuple[PreparedData, dict]:
    d = Path(directory)
    train_ds, meta = load_dataset(d / "train.json")
    test_ds, _ = load_dataset(d / "test.json")
    info = json.loads((d / "preprocess.json").read_text())
    weights = ClassWeights({int(k): v for k, v in info["class_weights"].items()})
    data = PreparedData(train_ds, test_ds, Scaler.from_dict(meta["scaler"]), weights, info["seed"],
                        info["T"], info["raw_rows"], info["dedup_rows"])
    return data, info


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    counts = parse_counts(args.counts)
    cfg = SynthConfig(seed=derive_seed(args.seed, "synth"), counts=counts)
    records = synthesize(cfg)
    out = _out_dir(args)
    with open(out / "synth.csv", "w", newline="", encoding="utf-8") as fh:
        serialize_csv(records, fh)
    summary = {"seed": args.seed, "counts": {k.name: v for k, v in counts.items()}, "frames": len(records),
               "output": str(out / "synth.csv")}
    _write_json(out / "synth.json", summary)
    _emit(args, summary, f"wrote {len(records)} frames to {out / 'synth.csv'} (seed {args.seed})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    records = parse_csv(args.input)
    targets = None
    if args.smote_target is not None:
        targets = {c: args.smote_target for c in range(6)}
    data = prepare(records, T=args.window_length, test_fraction=args.test_fraction, seed=args.seed,
                   smote=not args.no_smote, target_counts=targets)
    out = _out_dir(args)
    save_dataset(data.train, out / "train", data.scaler, args.seed)
    save_dataset(data.test, out / "test", data.scaler, args.seed)
    info = {"seed": args.seed, "T": data.T, "raw_rows": data.raw_rows, "dedup_rows": data.dedup_rows,
            "train_windows": len(data.train), "test_windows": len(data.test),
            "train_class_counts": data.train.class_counts().tolist(),
            "test_class_counts": data.test.class_counts().tolist(),
            "provenance": data.train.provenance_counts(),
            "class_weights": {str(k): v for k, v in data.weights.omega.items()},
            "scaler": data.scaler.to_dict()}
    _write_json(out / "preprocess.json", info)
    _emit(args, info, f"{data.raw_rows} rows -> {data.dedup_rows} unique -> {len(data.train)} train / "
                      f"{len(data.test)} test windows (T={data.T}, seed {args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    data, info = _load_prepared(args.input)
    model = build(_model_config(args, data.T))
    model.scaler = data.scaler
    tcfg = _train_config(args)
    model, history = train(model, data.train, tcfg, data.weights)
    out = _out_dir(args)
    model.metadata["seed"] = args.seed
    save(model, out / "model.ckpt")
    payload = {"seed": args.seed, "train_config": tcfg.__dict__, "history": history.to_dict()}
    _write_json(out / "history.json", payload)
    last = history.epochs[-1] if history.epochs else {}
    _emit(args, payload, f"trained {len(history.epochs)} epoch(s); best epoch {history.best_epoch}; "
                         f"last {json.dumps(last, default=float)}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data, _ = _load_prepared(args.input)
    model = load(args.checkpoint)
    report = evaluate(model, data.test)
    out = _out_dir(args)
    payload = {"seed": args.seed, **report.to_dict()}
    _write_json(out / "metrics.json", payload)
    (out / "metrics.txt").write_text(report.render() + "\n")
    _emit(args, payload, report.render())
    return EXIT_OK


def cmd_ablate(args) -> int:
    data, _ = _load_prepared(args.input)
    rows = run_ablation(data, _model_config(args, data.T), _train_config(args))
    out = _out_dir(args)
    table = render_ablation_table(rows)
    payload = {"seed": args.seed, "rows": [r.to_dict() for r in rows]}
    _write_json(out / "ablation.json", payload)
    (out / "ablation.txt").write_text(table + "\n")
    _emit(args, payload, table)
    return EXIT_OK


def cmd_explain(args) -> int:
    data, _ = _load_prepared(args.input)
    model = load(args.checkpoint)
    out = _out_dir(args)
    seed = derive_seed(args.seed, "shap")
    # standardized training mean is the zero vector
    background = np.zeros(data.test.F)
    reports = {}
    methods = ["kernel_shap", "permutation"] if args.method == "both" else [args.method]
    for method in methods:
        rep = explain_mod.build_attribution_report(model, data.test, method, n_samples=args.samples, seed=seed,
                                                   background=background)
        if method == "kernel_shap":
            rep.background = "training mean (zero in standardized units), tiled over T"
        reports[method] = rep
    payload = {"seed": args.seed, "reports": {k: v.to_dict() for k, v in reports.items()}}
    if model.attention is not None:
        n = min(len(data.test), args.samples)
        traces, _ = explain_mod.export_attention(model, data.test.windows[:n], out / "attention_heatmap.csv")
        payload["attention_windows"] = len(traces)
    _write_json(out / "attribution.json", payload)
    text = "\n\n".join(r.render() for r in reports.values())
    (out / "attribution.txt").write_text(text + "\n")
    _emit(args, payload, text)
    return EXIT_OK


def cmd_detect(args) -> int:
    model = load(args.checkpoint)
    session = stream_mod.DetectorSession(model, threshold=args.threshold)
    lines = stream_mod.open_lines(args.input)
    source = stream_mod.threaded_source(stream_mod.parse_stream(lines, header=not args.no_header))

    def on_alert(alert):
        print(json.dumps(alert.to_json_dict()), flush=True)

    summary = stream_mod.replay(source, session, rate=args.rate, on_alert=on_alert)
    payload = {"seed": args.seed, "summary": summary.to_dict()}
    print(json.dumps(payload, default=float), flush=True)
    if args.output_dir:
        _write_json(_out_dir(args) / "detect_summary.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output-dir", default="canguard_out")
    common.add_argument("--format", choices=("json", "text"), default="text")
    common.add_argument("-v", "--verbose", action="count", default=0)

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--epochs", type=int)
    model_opts.add_argument("--batch-size", type=int)
    model_opts.add_argument("--lr", type=float)
    model_opts.add_argument("--patience", type=int)
    model_opts.add_argument("--ablation-switch", choices=("single_pool",))
    model_opts.add_argument("--conv-filters", help="comma list, default 64,128,256")
    model_opts.add_argument("--gru-units", help="comma list, default 128,64")
    model_opts.add_argument("--dense-units", help="comma list, default 256,128")

    p = _Parser(prog="canguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate labelled synthetic CAN traffic")
    s.add_argument("--counts", default="benign=20000,dos=2000,gas=1000,rpm=1000,speed=1000,steering_wheel=1000")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="CSV -> windowed, split, scaled datasets")
    s.add_argument("--input", required=True)
    s.add_argument("--window-length", type=int, default=16)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--smote-target", type=int, help="per-class SMOTE target (default: majority count)")
    s.add_argument("--no-smote", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common, model_opts], help="train a model on a preprocessed directory")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on the test split")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common, model_opts], help="train the four component combinations")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("explain", parents=[common], help="per-byte attribution and attention heatmap")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--method", choices=("kernel_shap", "permutation", "both"), default="both")
    s.add_argument("--samples", type=int, default=100)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("detect", parents=[common], help="stream records through a checkpoint")
    s.add_argument("--input", default="-", help="file path, '-' for stdin, or tcp://host:port")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--rate", type=float, help="frames per second (default unlimited)")
    s.add_argument("--no-header", action="store_true")
    s.set_defaults(func=cmd_detect, output_dir=None)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"canguard: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalInstabilityError as exc:
        print(f"canguard: numerical instability: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"canguard: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
