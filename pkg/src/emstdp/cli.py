"""Command-line entry point: ``python -m emstdp <command> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import MISSING, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_real_checkpoint
from .config import ConfigError, RunConfig, _show, load_config
from .data import DatasetError
from .experiment import (EvalResult, IncrementalSchedule, MetricsWriter, evaluate, fp_evaluate, fp_train_epochs,
                         load_split, make_network, run_incremental, train_epochs)
from .mapper import (CoreConstraints, MappingError, error_path_compartments, map_network, sweep_neurons_per_core,
                     write_coremap_csv, write_sweep_csv)
from .neuron import PotentialOverflow
from .oracle import FpNetwork, fp_from_checkpoint
from .structure import StructureError

# exit codes by error category
EXIT_CODES = {"config": 2, "dataset": 3, "mapping": 4, "checkpoint": 5, "overflow": 6}
_CATEGORIES = ((ConfigError, "config"), (StructureError, "config"), (DatasetError, "dataset"),
               (FileNotFoundError, "dataset"), (MappingError, "mapping"), (CheckpointError, "checkpoint"),
               (PotentialOverflow, "overflow"))
INCREMENTAL_COLUMNS = ("increment", "round", "step", "observed", "accuracy", "per_class", "rehearsal_counts")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file; flags override it")
    g = p.add_argument_group("run configuration (defaults shown)")
    for f in fields(RunConfig):
        default = f.default if f.default is not MISSING else None
        help_ = RunConfig.HELP.get(f.name, f.name.replace("_", " "))
        g.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.type.upper(),
                       help=f"{help_} (default: {_show(default) or 'empty'})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emstdp", description="Two-phase spiking learning on an integer core model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _add_config_flags(p)
        return p

    cmd("train", "train the quantized engine and write a checkpoint plus metrics")
    p = cmd("eval", "phase-1 evaluation of a checkpoint on the test set")
    p.add_argument("--checkpoint", required=True)
    p = cmd("map", "place a network on cores and write the core map")
    p.add_argument("--checkpoint", help="map this checkpoint instead of a freshly built network")
    p = cmd("sweep", "sweep neurons per core and write cost proxies")
    p.add_argument("--l-m-list", default="1,2,5,10,20,50", help="comma list (default: 1,2,5,10,20,50)")
    p.add_argument("--modes", default="FA,DFA", help="feedback modes to sweep (default: FA,DFA)")
    p = cmd("incremental", "incremental class learning with two-step rounds")
    p.add_argument("--checkpoint", help="network already trained on the initial classes; skips pretraining")
    p.add_argument("--baseline", action="store_true", help="also train a joint baseline on the pooled data")
    p = cmd("oracle-train", "train the real-valued reference on the same data and structure")
    p.add_argument("--activation", default="relaxed", choices=("relaxed", "floor"),
                   help="rate function (default: relaxed)")
    p = cmd("oracle-eval", "evaluate a checkpoint with the real-valued forward pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--activation", default="relaxed", choices=("relaxed", "floor"),
                   help="rate function (default: relaxed)")
    return parser


def _config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _report(ev: EvalResult, label: str = "test"):
    print(f"{label} accuracy {ev.accuracy:.4f} over {ev.n} samples")
    print("per class " + ev.per_class_text())


# -- commands --------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    net = make_network(cfg)
    cmap = map_network(net, CoreConstraints(), cfg.l_m_values(len(net.layers)))
    out = _out(cfg)
    mw = MetricsWriter(out / "metrics.csv", out / "timing.csv")
    print(f"{net.spec.structure} {net.spec.feedback_mode}: {cmap.cores_used} cores, "
          f"thresholds {[l.threshold for l in net.layers[1:]]}")
    if cfg.epochs == 0:
        ev = evaluate(net, test)
        mw.write("train", ev, 0, epoch=0, cores_used=cmap.cores_used)
        _report(ev)

    def on_epoch(e, norm, ev):
        mw.write("train", ev, net.samples_seen, epoch=e + 1, update_norm=norm, cores_used=cmap.cores_used)
        print(f"epoch {e + 1}: accuracy {ev.accuracy:.4f}", flush=True)

    train_epochs(net, train, cfg.learning_params(), cfg.epochs, cfg.seed, cfg.shuffle, test, on_epoch)
    save_checkpoint(net, out / "model.ckpt")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str) -> int:
    test = load_split(cfg, "test")
    net = load_checkpoint(checkpoint)
    if test.x.shape[1] != net.layers[0].size:
        raise CheckpointError(f"checkpoint input size {net.layers[0].size} does not match data ({test.x.shape[1]})")
    ev = evaluate(net, test)
    out = _out(cfg)
    MetricsWriter(out / "eval.csv").write("eval", ev, net.samples_seen)
    _report(ev)
    return 0


def cmd_map(cfg: RunConfig, checkpoint: str | None) -> int:
    net = load_checkpoint(checkpoint) if checkpoint else make_network(cfg)
    cmap = map_network(net, CoreConstraints(), cfg.l_m_values(len(net.layers)))
    out = _out(cfg)
    write_coremap_csv(cmap, out / "coremap.csv")
    print(f"{net.spec.structure} {net.spec.feedback_mode}: {cmap.cores_used} cores, "
          f"{error_path_compartments(net)} error-path compartments")
    return 0


def cmd_sweep(cfg: RunConfig, l_m_list: str, modes: str) -> int:
    try:
        ks = [int(v) for v in l_m_list.split(",")]
    except ValueError:
        raise ConfigError(f"bad --l-m-list {l_m_list!r}") from None
    rows = []
    for mode in [m.strip() for m in modes.split(",") if m.strip()]:
        net = make_network(cfg.replace(feedback_mode=mode))
        rows += sweep_neurons_per_core(net, CoreConstraints(), ks)
    out = _out(cfg)
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        status = f"{r.cores_used} cores, {r.steps_per_sample} steps" if r.feasible else "infeasible"
        print(f"{r.mode} l_m={r.l_m}: {status}")
    return 0


def cmd_incremental(cfg: RunConfig, checkpoint: str | None, baseline: bool) -> int:
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    sched = IncrementalSchedule.from_config(cfg)
    net = load_checkpoint(checkpoint) if checkpoint else make_network(cfg)
    C = net.spec.num_classes
    bad = [c for c in sched.classes if not 0 <= c < C]
    if bad:
        raise ConfigError(f"schedule classes {bad} outside the {C} output classes")
    missing = sorted(set(sched.classes) - set(np.unique(train.y).tolist()))
    if missing:
        raise DatasetError(f"schedule classes {missing} have no training samples")
    out = _out(cfg)
    path = out / "incremental.csv"
    with open(path, "w", newline="") as f:
        f.write("# emstdp incremental format 1\n")
        csv.writer(f).writerow(INCREMENTAL_COLUMNS)

    def log(rec):
        with open(path, "a", newline="") as f:
            csv.writer(f).writerow((rec.increment, rec.round, rec.step, " ".join(map(str, rec.observed)),
                                    f"{rec.accuracy:.6f}", ";".join(f"{c}:{a:.4f}" for c, a in sorted(rec.per_class.items())),
                                    ";".join(f"{c}:{n}" for c, n in sorted(rec.rehearsal_counts.items()))))
        print(f"increment {rec.increment} round {rec.round} step {rec.step}: {rec.accuracy:.4f}", flush=True)

    base, _ = run_incremental(net, train, test, sched, cfg.learning_params(), cfg.seed,
                              0 if checkpoint else cfg.epochs, cfg.per_class_chunk, log)
    print(f"initial classes {list(sched.initial)}: {base:.4f}")
    save_checkpoint(net, out / "model.ckpt")
    if baseline:
        joint = joint_baseline(cfg, train, sched)
        ev = evaluate(joint, test, sched.classes)
        MetricsWriter(out / "baseline.csv").write("baseline", ev, joint.samples_seen)
        _report(ev, "joint baseline")
    return 0


def joint_baseline(cfg: RunConfig, train, sched: IncrementalSchedule):
    """Same engine and samples as the incremental run, trained jointly."""
    from .experiment import chunk_partition, train_pass, epoch_order

    parts = chunk_partition(train.y, sched.classes, sched.chunks, cfg.per_class_chunk)
    pooled = train.subset(np.concatenate([np.concatenate(parts[c]) for c in sched.classes]))
    net = make_network(cfg)
    for e in range(max(cfg.epochs, 1)):
        train_pass(net, pooled, cfg.learning_params(), epoch_order(cfg.seed, e, len(pooled)))
    return net


def cmd_oracle_train(cfg: RunConfig, activation: str) -> int:
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    net = make_network(cfg)
    fp = FpNetwork.from_built(net, activation)
    out = _out(cfg)
    mw = MetricsWriter(out / "oracle_metrics.csv", out / "oracle_timing.csv")

    def on_epoch(e, norm, ev):
        mw.write("oracle-train", ev, (e + 1) * len(train), epoch=e + 1, update_norm=norm)
        print(f"epoch {e + 1}: accuracy {ev.accuracy:.4f}", flush=True)

    fp_train_epochs(fp, train, float(Fraction(cfg.eta)), cfg.epochs, cfg.seed, cfg.shuffle, test, on_epoch)
    dense = {l: fp.weights[l - 1] for l in net.trainable}
    for l, layer in enumerate(net.layers[1:], start=1):
        dense.setdefault(l, layer.kernel if layer.kernel is not None else layer.weights)
    feedback = {f"dfa{l}": B for l, B in sorted(net.dfa_feedback.items())}
    feedback.update({f"fa{e.index}": e.feedback for e in net.error_layers})
    save_real_checkpoint(dense, feedback, net, out / "oracle.ckpt")
    print(f"wrote {out / 'oracle.ckpt'}")
    return 0


def cmd_oracle_eval(cfg: RunConfig, checkpoint: str, activation: str) -> int:
    test = load_split(cfg, "test")
    fp = fp_from_checkpoint(checkpoint, activation)
    if test.x.shape[1] != fp.weights[0].shape[1]:
        raise CheckpointError(f"checkpoint input size {fp.weights[0].shape[1]} does not match data")
    ev = fp_evaluate(fp, test)
    out = _out(cfg)
    MetricsWriter(out / "oracle_eval.csv").write("oracle-eval", ev, 0)
    _report(ev)
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    c = args.command
    if c == "train":
        return cmd_train(cfg)
    if c == "eval":
        return cmd_eval(cfg, args.checkpoint)
    if c == "map":
        return cmd_map(cfg, args.checkpoint)
    if c == "sweep":
        return cmd_sweep(cfg, args.l_m_list, args.modes)
    if c == "incremental":
        return cmd_incremental(cfg, args.checkpoint, args.baseline)
    if c == "oracle-train":
        return cmd_oracle_train(cfg, args.activation)
    return cmd_oracle_eval(cfg, args.checkpoint, args.activation)


def main(argv=None) -> int:
    try:
        return run(argv)
    except tuple(cls for cls, _ in _CATEGORIES) as e:
        cat = next(name for cls, name in _CATEGORIES if isinstance(e, cls))
        print(f"error[{cat}]: {e}", file=sys.stderr)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
