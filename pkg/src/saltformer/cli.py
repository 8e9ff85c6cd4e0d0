"""Command-line entry point: ``saltformer <command> [flags]``.

Exit status is 0 on success, 1 for usage errors and 2 for data or model
errors. Files are only written below ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import SaltError

COMMANDS = ("gen-data", "sort", "train", "eval", "binned-eval", "flops", "bench", "dump-attn")

DEFAULTS = {
    "seed": 0,
    "variant": "salt",
    "sort": "kt",
    "n": 32,
    "p": 4,
    "filters": (1, 3, 5),
    "layers": 1,
    "dtype": "f64",
    "reps": 30,
    "warmup": 5,
    "batch": 256,
    "n_jets": 1000,
    "classes": None,
    "pt_min": 1.0,
    "phases": ((128, 30),),
    "patience": 40,
    "lr": 1e-3,
    "val_fraction": 0.2,
    "bins": (0, 8, 16, 24, 32),
    "jet": 0,
    "n_list": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _phases(text: str) -> tuple[tuple[int, int], ...]:
    """``"128:30,256:10"`` -> ((128, 30), (256, 10))."""
    out = []
    for item in str(text).split(","):
        try:
            b, e = item.split(":")
            out.append((int(b), int(e)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"phase must look like BATCH:EPOCHS, got {item!r}") from None
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file with default flag values")
    g.add_argument("--out", help="output directory; nothing is written elsewhere")
    g.add_argument("--seed", type=int)
    g.add_argument("--variant", choices=["salt", "linformer", "transformer"])
    g.add_argument("--sort", "--key", dest="sort", choices=["pt", "kt", "dr", "morton"])
    g.add_argument("--n", type=int)
    g.add_argument("--p", type=int)
    g.add_argument("--filters", type=_int_list)
    g.add_argument("--layers", type=int, choices=[1, 2])
    g.add_argument("--dtype", choices=["f32", "f64"])
    g.add_argument("--reps", type=int)
    g.add_argument("--warmup", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--no-conv", dest="no_conv", action="store_const", const=True)
    g.add_argument("--partition", choices=["both", "key", "value", "none"])
    g.add_argument("--share-ef", dest="share_ef", action="store_const", const=True)

    parser = _Parser(prog="saltformer", description="Partitioned linear attention for jet tagging.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic jet file")
    p.add_argument("--n-jets", dest="n_jets", type=int)
    p.add_argument("--classes", type=int, help="number of classes; class k has k + 2 satellite prongs")

    p = sub.add_parser("sort", parents=[common], help="sort (and optionally pad) a jet file")
    p.add_argument("--data", required=True)
    p.add_argument("--pad", action="store_true", help="truncate/pad to --n before sorting")
    p.add_argument("--pt-min", dest="pt_min", type=float)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train", dest="train_path", help="training jet file (synthetic data if omitted)")
    p.add_argument("--val", dest="val_path", help="validation jet file")
    p.add_argument("--n-jets", dest="n_jets", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--phases", type=_phases, help="BATCH:EPOCHS,...")
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--pt-min", dest="pt_min", type=float)

    for name in ("eval", "binned-eval", "dump-attn"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=name != "dump-attn")
        p.add_argument("--data", required=True)
    sub.choices["binned-eval"].add_argument("--bins", type=_int_list, help="multiplicity edges")
    sub.choices["dump-attn"].add_argument("--jet", type=int, help="row of the data file to trace")

    p = sub.add_parser("flops", parents=[common], help="analytic FLOPs/params/memory")
    p.add_argument("--n-list", dest="n_list", type=_int_list, help="also write a scaling CSV")
    p.add_argument("--classes", type=int)

    sub.add_parser("bench", parents=[common], help="single-thread forward latency")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key in ("filters", "bins", "n_list") and isinstance(value, list):
                value = tuple(value)
            if key == "phases":
                value = tuple(tuple(p) for p in value)
            opts[key] = value
    for key, value in vars(args).items():
        if value is not None:
            opts[key] = value
    return opts


def _out_dir(opts: dict, required: bool = True) -> Path | None:
    if not opts.get("out"):
        if required:
            raise UsageError(f"{opts['command']} needs --out DIR")
        return None
    path = Path(opts["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model_config(opts: dict, classes: int):
    from .model import ModelConfig

    variant = opts["variant"]
    salt = variant == "salt"
    return ModelConfig(
        variant=variant,
        n=opts["n"],
        proj=opts["p"],
        filters=tuple(opts["filters"]),
        layers=opts["layers"],
        classes=classes,
        sort_key=opts["sort"],
        dtype=opts["dtype"],
        seed=opts["seed"],
        conv=False if opts.get("no_conv") else None,
        partition=opts.get("partition") if salt else None,
        share_ef=True if opts.get("share_ef") else None,
    )


# ---------------------------------------------------------------- commands


def cmd_gen_data(opts):
    from .jets import DEFAULT_CLASSES, ProngSpec, generate_synthetic, write_jets

    out = _out_dir(opts)
    classes = opts["classes"]
    specs = DEFAULT_CLASSES if classes is None else tuple(ProngSpec(prongs=k + 3) for k in range(classes))
    jets = generate_synthetic(opts["seed"], opts["n_jets"], specs)
    path = out / "jets.jsonl"
    write_jets(path, jets)
    print(f"wrote {len(jets)} jets to {path}")


def cmd_sort(opts):
    from .jets import read_jets, sort_jet, truncate_pad, write_jets

    out = _out_dir(opts)
    jets = read_jets(opts["data"])
    if opts.get("pad"):
        jets = [truncate_pad(j, opts["n"], opts["pt_min"]) for j in jets]
    jets = [sort_jet(j, opts["sort"]) for j in jets]
    path = out / "sorted.jsonl"
    write_jets(path, jets)
    print(f"sorted {len(jets)} jets by {opts['sort']} -> {path}")


def _load_split(opts):
    from .jets import generate_synthetic, read_jets

    if opts.get("train_path"):
        train_jets = read_jets(opts["train_path"])
        if opts.get("val_path"):
            val_jets = read_jets(opts["val_path"])
        else:
            cut = int(round(len(train_jets) * (1 - opts["val_fraction"])))
            train_jets, val_jets = train_jets[:cut], train_jets[cut:]
    else:
        jets = generate_synthetic(opts["seed"], opts["n_jets"])
        cut = int(round(len(jets) * (1 - opts["val_fraction"])))
        train_jets, val_jets = jets[:cut], jets[cut:]
    return train_jets, val_jets


def cmd_train(opts):
    from .errors import DataError
    from .jets import fit_pt_scaler, prepare_jets, to_dataset
    from .model import build_model, count_params, save_checkpoint
    from .train import TrainSchedule, train

    out = _out_dir(opts)
    train_jets, val_jets = _load_split(opts)
    if not train_jets or not val_jets:
        raise DataError("training and validation splits must both be non-empty")
    classes = opts["classes"] or int(max(j.label for j in train_jets + val_jets)) + 1
    cfg = _model_config(opts, max(classes, 2))
    ptr = prepare_jets(train_jets, cfg.n, cfg.sort_key, opts["pt_min"])
    pva = prepare_jets(val_jets, cfg.n, cfg.sort_key, opts["pt_min"])
    scaler = fit_pt_scaler(ptr)
    dtr, dva = to_dataset(ptr, scaler), to_dataset(pva, scaler)
    schedule = TrainSchedule(phases=opts["phases"], lr=opts["lr"], patience=opts["patience"])
    model = build_model(cfg)
    model, history = train(model, dtr, dva, schedule, seed=opts["seed"])
    history.write_csv(out / "history.csv")
    extra = {"scaler": [scaler.q05, scaler.q95], "pt_min": opts["pt_min"]}
    save_checkpoint(model, out / "model.ckpt", extra)
    summary = {
        "params": count_params(model),
        "epochs": len(history),
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "best_val_acc": history.records[history.best_epoch].val_acc if history.records else None,
        "config": cfg.to_dict(),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"trained {cfg.variant} ({summary['params']} params) for {len(history)} epochs; "
          f"best val loss {history.best_val_loss:.4f} acc {summary['best_val_acc']}")


def _load_eval_data(opts, cfg, extra):
    from .jets import PtScaler, prepare_jets, read_jets, to_dataset

    jets = read_jets(opts["data"])
    prepared = prepare_jets(jets, cfg.n, cfg.sort_key, extra.get("pt_min", 1.0))
    scaler = PtScaler(*extra["scaler"]) if "scaler" in extra else None
    return to_dataset(prepared, scaler)


def _load_model(opts):
    from .model import load_checkpoint, read_checkpoint

    header, _ = read_checkpoint(opts["checkpoint"])
    return load_checkpoint(opts["checkpoint"]), header.get("extra", {})


def cmd_eval(opts):
    from .metrics import report_from_scores, write_scores_csv
    from .model import predict_scores

    out = _out_dir(opts)
    model, extra = _load_model(opts)
    data = _load_eval_data(opts, model.config, extra)
    scores = predict_scores(model, data.x)
    report = report_from_scores(scores, data.y)
    write_scores_csv(out / "scores.csv", scores, data.y)
    with open(out / "report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    print(report.summary())


def cmd_binned_eval(opts):
    from .metrics import binned_accuracy, write_bins_csv

    out = _out_dir(opts)
    model, extra = _load_model(opts)
    data = _load_eval_data(opts, model.config, extra)
    bins = binned_accuracy(model, data, opts["bins"])
    write_bins_csv(out / "binned_accuracy.csv", bins)
    for b in bins:
        acc = "absent" if b.absent else f"{b.accuracy:.4f}"
        print(f"[{b.lo}, {b.hi}) n={b.count} accuracy={acc}")


def cmd_flops(opts):
    from .profiler import cost_report, write_scaling_csv

    cfg = _model_config(opts, opts.get("classes") or 5)
    report = cost_report(cfg, batch=opts["batch"])
    out = _out_dir(opts, required=False)
    print(f"{report.flops:,}")
    print(f"params {report.params:,}  activation_bytes(batch={opts['batch']}) {report.activation_bytes:,}")
    if out is not None:
        with open(out / "cost.json", "w") as fh:
            json.dump({"flops": report.flops, "params": report.params,
                       "activation_bytes": report.activation_bytes, "config": report.config}, fh, indent=2)
        if opts.get("n_list"):
            write_scaling_csv(out / "flops_scaling.csv", ["salt", "linformer", "transformer"], sorted(opts["n_list"]))


def cmd_bench(opts):
    from .model import build_model
    from .profiler import latency_bench

    cfg = _model_config(opts, 5)
    report = latency_bench(build_model(cfg), batch=opts["batch"], reps=opts["reps"], warmup=opts["warmup"])
    print(f"{cfg.variant} n={cfg.n} batch={report.batch} {cfg.dtype}: "
          f"{report.mean_us:.3f} +- {report.std_us:.3f} us/jet over {report.reps} reps")
    out = _out_dir(opts, required=False)
    if out is not None:
        with open(out / "bench.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)


def cmd_dump_attn(opts):
    from .errors import ConfigError
    from .jets import fit_pt_scaler, prepare_jets, read_jets, to_dataset
    from .model import build_model, forward
    from .tensor import no_grad

    out = _out_dir(opts)
    if opts.get("checkpoint"):
        model, extra = _load_model(opts)
        data = _load_eval_data(opts, model.config, extra)
    else:
        jets = read_jets(opts["data"])
        classes = max(2, int(max(j.label for j in jets)) + 1) if jets else 2
        model = build_model(_model_config(opts, classes))
        prepared = prepare_jets(jets, model.config.n, model.config.sort_key, opts["pt_min"])
        data = to_dataset(prepared, fit_pt_scaler(prepared))
    if model.config.variant != "salt":
        raise ConfigError("attention traces are only recorded for the salt variant")
    if not 0 <= opts["jet"] < len(data):
        raise ConfigError(f"--jet {opts['jet']} is out of range for {len(data)} jets")
    traces = []
    with no_grad():
        forward(model, data.x[opts["jet"]:opts["jet"] + 1], trace=traces)
    paths = []
    for layer, tr in enumerate(traces):
        paths += tr.write_csv(out, jet=0, prefix=f"layer{layer}")
    print(f"wrote {len(paths)} attention CSV files to {out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "sort": cmd_sort,
    "train": cmd_train,
    "eval": cmd_eval,
    "binned-eval": cmd_binned_eval,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "dump-attn": cmd_dump_attn,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        opts = resolve(args)
    except UsageError as exc:
        print(f"saltformer: usage error: {exc}", file=sys.stderr)
        return 1
    threads = os.environ.get("SALT_THREADS")
    try:
        from threadpoolctl import threadpool_limits

        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"saltformer: usage error: SALT_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=limit):
            HANDLERS[args.command](opts)
    except UsageError as exc:
        print(f"saltformer: usage error: {exc}", file=sys.stderr)
        return 1
    except (SaltError, OSError) as exc:
        print(f"saltformer: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
