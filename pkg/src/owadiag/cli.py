"""``owadiag`` command-line interface.

Exit status: 0 on success, 1 for usage errors, 2 for runtime or data errors.
Any subcommand accepts ``--config FILE`` holding ``key = value`` lines named
after its long flags; flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataprep, harness, synthplant
from .dataprep import FAULT_CLASSES
from .layouts import LAYOUT_NAMES, build_layout
from .nn import load_checkpoint, save_checkpoint
from .quantifiers import PARAMETRIC, discrete_orness, parse_quantifier, quantifier_orness, rim_weights

log = logging.getLogger("owadiag")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ALL_QUANTIFIERS = "max,average,most,atmiddle:0.2,atleasthalf,atleast:0.75"

DESK_PRESET = {"run_length": 20, "combos": 2, "runs_per_combo": 5, "nonfault_runs": 5}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _csv_list(conv=str):
    def parse(text):
        try:
            return [conv(t.strip()) for t in text.split(",") if t.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    return parse


def _quantifier_arg(args):
    try:
        q = parse_quantifier(args.quantifier, args.alpha)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if q.kind in PARAMETRIC and args.alpha is None and ":" not in args.quantifier:
        raise UsageError(f"--alpha is required for quantifier {q.kind.value}")
    return q


def _add_window(p):
    p.add_argument("--window", type=_positive, default=4, help="window size S (samples)")
    p.add_argument("--step", type=_positive, default=1, help="window step P (samples)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="owadiag", description="Linguistic OWA pooling CNNs for plant fault diagnosis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic monitoring corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=("default", "desk"), default="default")
    g.add_argument("--variables", type=_positive, default=12)
    g.add_argument("--run-length", type=_positive)
    g.add_argument("--combos", type=_positive)
    g.add_argument("--runs-per-combo", type=int)
    g.add_argument("--nonfault-runs", type=int)
    g.add_argument("--classes", type=_csv_list(), default=list(FAULT_CLASSES))
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model on a cross-validation split")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--layout", choices=LAYOUT_NAMES, default="model7")
    t.add_argument("--quantifier", default="most")
    t.add_argument("--alpha", type=float)
    _add_window(t)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch", type=_positive, default=64)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--partition-seed", type=int, default=0)
    t.add_argument("--fold", type=_positive, default=1, help="held-out fold (1-based)")

    gr = sub.add_parser("grid", help="hyperparameter grid over the cross-validation folds")
    gr.add_argument("--config")
    gr.add_argument("--corpus", required=True)
    gr.add_argument("--out", required=True)
    gr.add_argument("--layouts", type=_csv_list(), default=list(LAYOUT_NAMES))
    gr.add_argument("--quantifiers", type=_csv_list(), default=ALL_QUANTIFIERS.split(","))
    gr.add_argument("--lr", type=_csv_list(float), default=list(harness.LEARNING_RATES))
    gr.add_argument("--batch", type=_csv_list(int), default=list(harness.BATCH_SIZES))
    gr.add_argument("--epochs", type=_csv_list(int), default=list(harness.EPOCHS))
    _add_window(gr)
    gr.add_argument("--momentum", type=float, default=0.9)
    gr.add_argument("--seed", type=int, default=0)
    gr.add_argument("--partition-seed", type=int, default=0)
    gr.add_argument("--folds", type=_csv_list(int), help="subset of folds (1-based)")
    gr.add_argument("--jobs", type=_positive, default=1)
    gr.add_argument("--save-models", action="store_true")

    e = sub.add_parser("evaluate", help="score a checkpoint on a held-out fold")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--stats", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--fold", type=_positive, default=1)
    e.add_argument("--partition-seed", type=int, default=0)
    _add_window(e)
    e.add_argument("--out")

    r = sub.add_parser("report", help="pooling comparison table from a grid directory")
    r.add_argument("--config")
    r.add_argument("--grid", required=True)
    r.add_argument("--baseline", default="max")
    r.add_argument("--layout")
    r.add_argument("--out")

    d = sub.add_parser("diagnose", help="stream diagnosis over incoming samples")
    d.add_argument("--config")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--stats", required=True)
    d.add_argument("--input", help="CSV file (default: standard input)")
    _add_window(d)
    d.add_argument("--strict", action="store_true", help="abort on the first malformed row")
    d.add_argument("--out")

    q = sub.add_parser("quantifier", help="OWA weights and orness of a quantifier")
    q.add_argument("--config")
    q.add_argument("--name", required=True)
    q.add_argument("--alpha", type=float)
    q.add_argument("--n", type=_positive, action="append")
    return parser


# ---------------------------------------------------------------------------
# config files


def _config_tokens(argv):
    """Expand ``--config FILE`` into flag tokens placed before the real flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a file argument")
    path = Path(argv[i + 1])
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    rest = argv[:i] + argv[i + 2 :]
    tokens = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        flag = "--" + key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    # the subcommand must come first; config flags go right after it
    cmd_at = next((j for j, a in enumerate(rest) if not a.startswith("-")), len(rest))
    return rest[: cmd_at + 1] + tokens + rest[cmd_at + 1 :]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out=None):
    out = out or sys.stdout
    unknown = [c for c in args.classes if c not in FAULT_CLASSES]
    if unknown:
        raise UsageError(f"unknown fault class {unknown[0]!r}; expected one of {', '.join(FAULT_CLASSES)}")
    preset = DESK_PRESET if args.preset == "desk" else {}
    run_length = args.run_length or preset.get("run_length", 288)
    n_combos = args.combos or preset.get("combos", 10)
    runs = args.runs_per_combo if args.runs_per_combo is not None else preset.get("runs_per_combo", 10)
    nonfault = args.nonfault_runs if args.nonfault_runs is not None else preset.get("nonfault_runs", 5)
    if runs < 0 or nonfault < 0:
        raise UsageError("run counts must be >= 0")
    cfg = synthplant.PlantConfig(n_variables=args.variables, run_length=run_length, noise_sigma=args.noise)
    corpus = synthplant.generate_corpus(args.out, cfg, synthplant.default_combos(cfg, n_combos),
                                        runs, nonfault, args.seed, args.classes)
    counts = {}
    for rec in corpus.records:
        counts[rec.fault_class] = counts.get(rec.fault_class, 0) + 1
    print(f"wrote {len(corpus.records)} runs to {corpus.root}", file=out)
    for cls, n in counts.items():
        print(f"{cls},{n}", file=out)
    return EXIT_OK


def _load_partition(corpus, seed):
    records, series = harness.load_corpus(corpus)
    return records, series, dataprep.cv_partition(records, 5, seed)


def _check_fold(fold, partition):
    if not 1 <= fold <= partition.k:
        raise UsageError(f"--fold must lie in [1, {partition.k}]")
    return fold - 1


def cmd_train(args, out=None):
    out = out or sys.stdout
    q = _quantifier_arg(args)
    cfg = harness.TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, momentum=args.momentum,
                              seed=args.seed, layout=args.layout, quantifier=q)
    _, series, part = _load_partition(args.corpus, args.partition_seed)
    fold = _check_fold(args.fold, part)
    data = harness.prepare_fold(series, part, fold, args.window, args.step)
    layout = build_layout(args.layout, q, data.X_train.shape[2], args.window, harness.N_CLASSES)
    net, history = harness.train(layout, data.X_train, data.y_train, cfg)
    metrics = harness.evaluate(net, data.X_test, data.y_test)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    save_checkpoint(dest / "model.npz", net, layout.to_dict(),
                    {"window": args.window, "step": args.step, "fold": args.fold, "lr": args.lr,
                     "batch": args.batch, "epochs": args.epochs, "seed": args.seed})
    data.stats.save(dest / "stats.npz")
    payload = {"fold": args.fold, "final_loss": history[-1] if history else None, **metrics.to_dict()}
    (dest / "metrics.json").write_text(json.dumps(payload, indent=2))
    print(f"accuracy={metrics.accuracy:.4f} macro_f1={metrics.macro_f1:.4f} -> {dest}", file=out)
    return EXIT_OK


def cmd_grid(args, out=None):
    out = out or sys.stdout
    try:
        quants = tuple(parse_quantifier(s) for s in args.quantifiers)
    except ValueError as e:
        raise UsageError(str(e)) from None
    bad = [n for n in args.layouts if n not in LAYOUT_NAMES]
    if bad:
        raise UsageError(f"unknown layout {bad[0]!r}")
    spec = harness.GridSpec(tuple(args.layouts), quants, tuple(args.lr), tuple(args.batch), tuple(args.epochs),
                            args.momentum, args.seed, args.window, args.step)
    records = dataprep.load_manifest(args.corpus)
    part = dataprep.cv_partition(records, 5, args.partition_seed)
    folds = None if args.folds is None else [_check_fold(f, part) for f in args.folds]
    result = harness.run_grid(spec, part, args.corpus, args.out, folds=folds, jobs=args.jobs,
                              save_models=args.save_models)
    failed = [c for c in result.cells if not c.ok]
    print(f"{len(result.cells)} cells, {len(failed)} failed -> {args.out}", file=out)
    try:
        print(f"best: {harness.select_best(result)}", file=out)
    except ValueError:
        pass
    return EXIT_OK


def cmd_evaluate(args, out=None):
    out = out or sys.stdout
    net, header = load_checkpoint(args.checkpoint)
    stats = dataprep.StandardizationStats.load(args.stats)
    _, series, part = _load_partition(args.corpus, args.partition_seed)
    fold = _check_fold(args.fold, part)
    test = [dataprep.apply_stats(series[r], stats) for r in part.test_ids(fold)]
    harness.guard_leakage(test, stats)
    X, y = harness.stack_windows(test, args.window, args.step)
    metrics = harness.evaluate(net, X, y)
    text = json.dumps({"fold": args.fold, **metrics.to_dict()}, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text, file=out)
    return EXIT_OK


def cmd_report(args, out=None):
    out = out or sys.stdout
    result = harness.load_grid(args.grid)
    table = harness.pooling_report(result, args.baseline, args.layout)
    if args.out:
        Path(args.out).write_text(table)
    out.write(table)
    return EXIT_OK


def cmd_diagnose(args, out=None, stdin=None, err=None):
    out, stdin, err = out or sys.stdout, stdin or sys.stdin, err or sys.stderr
    net, _ = load_checkpoint(args.checkpoint)
    stats = dataprep.StandardizationStats.load(args.stats)
    V = stats.mean.shape[0]
    if net.input_shape[1:] != (V, args.window):
        raise RuntimeError(f"checkpoint expects input {net.input_shape[1:]}, got {(V, args.window)}")
    fh = open(args.input, encoding="utf-8") if args.input else stdin
    sink = open(args.out, "w", encoding="utf-8") if args.out else out
    status = EXIT_OK
    try:
        source = harness.csv_sample_source(fh, V)
        for event in harness.diagnose_stream(net, stats, source, args.window, args.step):
            if isinstance(event, harness.StreamError):
                print(f"row {event.row}: {event.message}", file=err)
                if args.strict:
                    status = EXIT_RUNTIME
                    break
                continue
            print(event.to_csv(), file=sink, flush=True)
    finally:
        if args.input:
            fh.close()
        if args.out:
            sink.close()
    return status


def cmd_quantifier(args, out=None):
    out = out or sys.stdout
    q = _quantifier_arg(argparse.Namespace(quantifier=args.name, alpha=args.alpha))
    cont = quantifier_orness(q)
    print(f"# quantifier={q.label}", file=out)
    for n in args.n or [4]:
        w = rim_weights(q, n)
        print("n,discrete_orness,quantifier_orness," + ",".join(f"w{j}" for j in range(1, n + 1)), file=out)
        cells = [f"{v:.6g}" if abs(v) > 1e-15 else "0" for v in w.weights]
        print(f"{n},{discrete_orness(w):.6f},{cont:.6f}," + ",".join(cells), file=out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "grid": cmd_grid,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "diagnose": cmd_diagnose,
    "quantifier": cmd_quantifier,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_config_tokens(argv))
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except harness.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
