"""ernn command line: build, prune, calibrate, convert, run and benchmark models."""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

from rich.console import Console
from rich.table import Table

from . import __version__, modelio
from .bench import bench, compare, decode_all, time_layer_modes
from .calibrate import calibrate_model
from .cells import CellKind
from .errors import ErnnError, UsageError
from .features import load_dataset
from .log import configure_logging
from .pruning import PruningSchedule
from .rnnt import QuantMode, RnntModel, convert_to_hybrid, convert_to_integer, init_random_model, prune_model
from .topology import PRESETS, TopologyConfig, count_params, load_topology
from .train import DEMO_SCHEDULE, TrainConfig, demo_train

EPILOG = """\
examples:
  ernn info baseline                                 # parameter counts and file sizes of a preset
  ernn init tiny -o tiny.ernn                        # seeded random float model
  ernn prune tiny.ernn --sparsity 0.5 --block 16x1 -o sparse.ernn
  ernn calibrate tiny.ernn --data feats/ -o tiny.stats
  ernn convert tiny.ernn --mode integer --stats tiny.stats -o tiny-int.ernn
  ernn run tiny-int.ernn --data feats/ --workers 4
  ernn bench tiny-int.ernn --data feats/ --percentile 0.9 --frame-ms 10
  ernn bench --modes lstm:640x2048x640               # per-step time of one layer in each mode
  ernn compare tiny.ernn tiny-int.ernn --data feats/ --json
  ernn demo-train --final-sparsity 0.5
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message, hint=f"see '{self.prog} --help'")


def _block(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"block must look like 16x1, got {text!r}") from None
    return rows, cols


def _layer_shape(text: str) -> tuple[CellKind, int, int, int]:
    try:
        kind, dims = text.split(":")
        inp, hidden, proj = (int(v) for v in dims.lower().split("x"))
        return CellKind(kind), inp, hidden, proj
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"layer shape must look like lstm:640x2048x640 (kind:input x hidden x projection), got {text!r}"
        ) from None


def _emit(args: argparse.Namespace, data: dict[str, Any], table: Table | str) -> None:
    if args.json:
        print(json.dumps(data, indent=2, default=str))
    else:
        Console().print(table)


def _topology_table(t: TopologyConfig, title: str) -> Table:
    table = Table(title=title)
    for col in ("layer", "kind", "input", "hidden", "projection", "sparsity", "layer norm"):
        table.add_column(col, justify="left" if col in ("layer", "kind") else "right")
    for prefix, spec in t.layers():
        sparsity = "-" if spec.sparsity is None else f"{spec.sparsity:.0%} @ {spec.block[0]}x{spec.block[1]}"
        table.add_row(
            prefix,
            str(spec.kind),
            str(spec.input),
            str(spec.hidden),
            str(spec.projection),
            sparsity,
            "yes" if spec.layer_norm else "no",
        )
    return table


def _is_model_file(source: str) -> bool:
    path = Path(source)
    return path.is_file() and path.suffix not in (".yaml", ".yml")


def cmd_info(args: argparse.Namespace) -> int:
    model: RnntModel | None = modelio.load(args.source) if _is_model_file(args.source) else None
    t = model.topology if model is not None else load_topology(args.source)
    counts = count_params(t)
    sizes = {mode.value: modelio.file_size_estimate(t, mode) for mode in QuantMode}
    data: dict[str, Any] = {"params": counts.as_dict(), "file_bytes": sizes}
    if model is not None:
        data["mode"] = str(model.mode)
        data["stored_params"] = model.param_count()
    table = _topology_table(t, f"{args.source}" + (f" ({model.mode})" if model is not None else ""))
    table.caption = (
        f"{counts.total / 1e6:.2f}M params ("
        + ", ".join(f"{k} {v / 1e6:.2f}M" for k, v in counts.sections.items())
        + "); file bytes: "
        + ", ".join(f"{k} {v / 1e6:.1f}MB" for k, v in sizes.items())
    )
    _emit(args, data, table)
    return 0


def cmd_init(args: argparse.Namespace) -> int:
    model = init_random_model(load_topology(args.topology), seed=args.seed)
    size = modelio.save(model, args.output)
    summary = {"output": args.output, "bytes": size, "params": model.param_count()}
    _emit(args, summary, f"wrote {args.output} ({size:,} bytes)")
    return 0


def cmd_prune(args: argparse.Namespace) -> int:
    model = modelio.load(args.model)
    encoder = args.encoder_sparsity if args.encoder_sparsity is not None else args.sparsity
    prediction = args.prediction_sparsity if args.prediction_sparsity is not None else args.sparsity
    if encoder is None and prediction is None:
        if model.topology.pruning is None:
            raise UsageError(
                "nothing to prune",
                hint="pass --sparsity or the per-group flags, or add a pruning block to the topology",
            )
        encoder = prediction = model.topology.pruning.schedule.final_sparsity
    model = prune_model(model, encoder, prediction, args.block)
    size = modelio.save(model, args.output)
    params = model.param_count()
    _emit(
        args,
        {"output": args.output, "bytes": size, "params": params},
        f"wrote {args.output} ({params:,} params, {size:,} bytes)",
    )
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    model = modelio.load(args.model)
    obs = calibrate_model(model, load_dataset(args.data, args.frame_ms / 1000))
    modelio.save_stats(obs, args.output)
    table = Table(title=f"activation ranges ({len(obs.ranges)} tensors)")
    for col in ("tensor", "max |x|", "min", "max", "observations"):
        table.add_column(col, justify="left" if col == "tensor" else "right")
    for tid, r in sorted(obs.ranges.items()):
        table.add_row(tid, f"{r.max_abs:.4g}", f"{r.min:.4g}", f"{r.max:.4g}", str(r.count))
    _emit(args, {tid: vars(r) for tid, r in obs.ranges.items()}, table)
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    model = modelio.load(args.model)
    if args.mode == "hybrid":
        converted = convert_to_hybrid(model)
    else:
        if args.stats is None:
            raise UsageError("integer conversion needs --stats", hint="produce one with 'ernn calibrate'")
        converted = convert_to_integer(model, modelio.load_stats(args.stats))
    size = modelio.save(converted, args.output)
    _emit(
        args,
        {"output": args.output, "mode": str(converted.mode), "bytes": size},
        f"wrote {converted.mode} model {args.output} ({size:,} bytes)",
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    model = modelio.load(args.model)
    utterances = load_dataset(args.data, args.frame_ms / 1000)
    decodes = decode_all(model, utterances, args.max_symbols, args.workers)
    ids = [u.id or f"utt{n}" for n, u in enumerate(utterances)]
    table = Table(title=f"greedy decodes ({model.mode})")
    table.add_column("utterance")
    table.add_column("tokens")
    for uid, tokens in zip(ids, decodes):
        table.add_row(uid, " ".join(map(str, tokens)))
    _emit(args, dict(zip(ids, decodes)), table)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if args.modes is not None:
        kind, inp, hidden, proj = args.modes
        timings = time_layer_modes(kind, inp, hidden, proj, steps=args.steps)
        table = Table(title=f"{kind} layer {inp}x{hidden}x{proj}, per-step wall time")
        table.add_column("mode")
        table.add_column("ms/step", justify="right")
        for mode, seconds in timings.items():
            table.add_row(mode, f"{1e3 * seconds:.3f}")
        _emit(args, timings, table)
        return 0
    if args.model is None or args.data is None:
        raise UsageError("bench needs a model and --data", hint="or pass --modes KIND:INxHIDDENxPROJ")
    model = modelio.load(args.model)
    report = bench(
        model,
        load_dataset(args.data, args.frame_ms / 1000),
        args.repetitions,
        warmup=args.warmup,
        percentile=args.percentile,
        max_symbols=args.max_symbols,
    )
    table = Table(title=f"{report.mode} model, {report.params:,} params")
    for col in ("utterance", "frames", "audio s", "wall s", "RT"):
        table.add_column(col, justify="left" if col == "utterance" else "right")
    for u in report.utterances:
        table.add_row(u.id, str(u.frames), f"{u.duration:.2f}", f"{u.wall:.4f}", f"{u.rt:.3f}")
    table.caption = f"RT({report.percentile:g}) = {report.rt_percentile:.3f}, mean RT = {report.mean_rt:.3f}"
    _emit(args, report.as_dict(), table)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    report = compare(
        modelio.load(args.model_a),
        modelio.load(args.model_b),
        load_dataset(args.data, args.frame_ms / 1000),
        args.max_symbols,
    )
    table = Table(title=f"{args.model_a} vs {args.model_b}")
    for col in ("layer", "max |Δ|", "mean |Δ|"):
        table.add_column(col, justify="left" if col == "layer" else "right")
    for name, d in report.layers.items():
        table.add_row(name, f"{d.max_abs:.3g}", f"{d.mean_abs:.3g}")
    table.caption = f"token agreement {report.agreement:.1%} over {report.utterances} utterances"
    _emit(args, report.as_dict(), table)
    return 0


def _train_schedule(args: argparse.Namespace) -> tuple[PruningSchedule, tuple[str, ...]]:
    """The topology's pruning block (or the demo default), with any schedule flags on top."""
    schedule, prunable = DEMO_SCHEDULE, ("W", "R")
    if args.topology is not None:
        pruning = load_topology(args.topology).pruning
        if pruning is None:
            raise UsageError(f"{args.topology} has no pruning block", hint="add one or drop --topology")
        schedule, prunable = pruning.schedule, pruning.prunable
    flags = {
        "initial_sparsity": args.initial_sparsity,
        "final_sparsity": args.final_sparsity,
        "start_step": args.start_step,
        "end_step": args.end_step,
        "mask_update_interval": args.interval,
    }
    return replace(schedule, **{k: v for k, v in flags.items() if v is not None}), prunable


def cmd_demo_train(args: argparse.Namespace) -> int:
    schedule, prunable = _train_schedule(args)
    config = TrainConfig(
        kind=args.kind,
        layers=args.layers,
        hidden=args.hidden,
        steps=args.steps,
        learning_rate=args.learning_rate,
        schedule=schedule,
        prunable_matrices=prunable,
        seed=args.seed,
    )
    result = demo_train(config)
    table = Table(title=f"{config.kind} x{config.layers}, hidden {config.hidden}")
    for col in ("step", "loss", "target", "sparsity", "churn", "recovered"):
        table.add_column(col, justify="right")
    for e in result.log:
        table.add_row(
            str(e["step"]),
            f"{e['loss']:.5f}",
            f"{e['target']:.3f}",
            f"{e['sparsity']:.3f}",
            str(e["churn"]),
            str(e["recovered"]),
        )
    table.caption = f"final mask sparsity {result.final_sparsity:.3f}"
    _emit(args, {"log": result.log, "final_sparsity": result.final_sparsity}, table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ernn",
        description="Block-sparse, quantized RNN-T inference tools",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    common.add_argument("--json", action="store_true", help="JSON output")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--frame-ms", type=float, default=10.0, help="frame length for text feature files (default: 10)")
    data.add_argument("--max-symbols", type=int, default=10, help="tokens emitted per frame at most (default: 10)")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("info", parents=[common], help="parameter counts and file sizes")
    p.add_argument("source", help=f"model file, topology YAML or preset ({', '.join(sorted(PRESETS))})")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("init", parents=[common], help="create a seeded random float model")
    p.add_argument("topology", help="topology YAML or preset name")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("prune", parents=[common], help="one-shot block magnitude pruning")
    p.add_argument("model")
    p.add_argument("--sparsity", type=float, help="target for encoder and prediction W/R matrices")
    p.add_argument("--encoder-sparsity", type=float)
    p.add_argument("--prediction-sparsity", type=float)
    p.add_argument("--block", type=_block, default=None, help="block shape, e.g. 16x1 (default: the topology's)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("calibrate", parents=[common], help="record activation ranges of a float model")
    p.add_argument("model")
    p.add_argument("--data", required=True, help="feature file or directory")
    p.add_argument("--frame-ms", type=float, default=10.0)
    p.add_argument("-o", "--output", required=True, help="stats file to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("convert", parents=[common], help="quantize a float model")
    p.add_argument("model")
    p.add_argument("--mode", choices=("hybrid", "integer"), required=True)
    p.add_argument("--stats", help="calibration stats (integer mode)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("run", parents=[common, data], help="greedy-decode feature files")
    p.add_argument("model")
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1, help="parallel decode threads (default: 1)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", parents=[common, data], help="real-time factor of greedy decoding")
    p.add_argument("model", nargs="?")
    p.add_argument("--data")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--warmup", type=int, default=1, help="untimed runs before measuring (default: 1)")
    p.add_argument("--percentile", type=float, default=0.9)
    p.add_argument(
        "--modes", type=_layer_shape, metavar="KIND:INxHIDDENxPROJ", help="time one layer in every mode instead"
    )
    p.add_argument("--steps", type=int, default=20, help="steps per mode with --modes")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", parents=[common, data], help="per-layer deltas and decode agreement")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("demo-train", parents=[common], help="toy training run with gradual block pruning")
    p.add_argument("--kind", choices=("lstm", "cifg"), default="lstm")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--topology", help="take the schedule and prunable matrices from this topology's pruning block")
    p.add_argument("--initial-sparsity", type=float, help="default: 0.0")
    p.add_argument("--final-sparsity", type=float, help="default: 0.5")
    p.add_argument("--start-step", type=int, help="default: 50")
    p.add_argument("--end-step", type=int, help="default: 250")
    p.add_argument("--interval", type=int, help="mask update interval in steps (default: 25)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo_train)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose)
        return args.func(args)
    except ErnnError as e:
        print(f"Error: {e}", file=sys.stderr)
        if e.hint:
            print(f"\n{e.hint}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e.strerror or e}: {e.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
