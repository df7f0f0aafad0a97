"""Command line interface.

Subcommands: gen, train-source, transfer, eval, sweep, toy-crps, gradcheck.
Failures print one ``error: <kind>: <message>`` line to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import io as IO
from . import model as M
from . import objectives as O
from . import report as R
from . import training as TR
from .gradcheck import check_model

GRADCHECK_TOL = 1e-4
EXIT_FAILURE = 1
EXIT_USAGE = 2
GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "verbose": False}


class CliError(Exception):
    pass


def _load_sweep(args) -> X.SweepConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise X.ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise X.ConfigError(f"invalid JSON in {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise X.ConfigError("config must be a JSON object")
    seeds = None if args.seed is None else (args.seed,)
    return X.sweep_from_dict(data, seeds)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen(args) -> int:
    sweep = _load_sweep(args)
    sc = sweep.scenario
    ws = X.Workspace()
    out = _out(args, "data")
    for i, ds in enumerate(ws.source_datasets(sc, len(sc.sources))):
        IO.write_dataset(ds, out / f"source{i}")
    for env_type, _ in sc.targets:
        ds = ws.target_dataset(sc, env_type)
        IO.write_dataset(ds.subset(np.arange(sc.n_pool)), out / f"target_{env_type}_pool")
        IO.write_dataset(ds.subset(np.arange(sc.n_pool, sc.n_pool + sc.n_target_test)), out / f"target_{env_type}_test")
    print(out)
    return 0


def _source_config(args, sweep: X.SweepConfig) -> TR.TrainConfig:
    seed = sweep.source_seed if args.seed is None else args.seed
    return replace(sweep.source_train, loss=args.loss, seed=seed)


def cmd_train_source(args) -> int:
    sweep = _load_sweep(args)
    if args.data:
        data = [IO.read_dataset(p) for p in args.data]
    else:
        n = len(sweep.scenario.sources)
        data = X.Workspace().source_datasets(sweep.scenario, n)
    if args.strategy == "DTL":
        data = data[:1]
    res = TR.train_meml(data, _source_config(args, sweep))
    out = _out(args, "source")
    for n in range(res.n_environments):
        IO.save_checkpoint(res.model(n), out / f"env{n}")
    (out / "curves.csv").write_text(
        "epoch,train_loss,val_loss,phase,lr\n"
        + "".join(f"{c.epoch},{c.train_loss!r},{c.val_loss!r},{c.phase},{c.lr!r}\n" for c in res.curves),
        encoding="utf-8")
    print(out)
    return 0


def cmd_transfer(args) -> int:
    sweep = _load_sweep(args)
    target = IO.read_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    cfg = replace(sweep.target_config(args.loss), seed=seed)
    if args.source:
        theta = IO.load_checkpoint(args.source).phi
    elif args.mode == "gradual":
        raise CliError("gradual unfreezing needs --source")
    else:
        theta = M.init_phi(seed)
    if args.mode == "gradual":
        mdl, _ = TR.transfer_gradual_unfreeze(theta, target, cfg)
    else:
        mdl, _ = TR.transfer_finetune(theta, target, cfg)
    out = _out(args, "model")
    IO.save_checkpoint(mdl, out)
    print(out)
    return 0


def cmd_eval(args) -> int:
    mdl = IO.load_checkpoint(args.model)
    data = IO.read_dataset(args.data)
    rep = O.score_testset(M.predict(mdl, data.H, data.normalizer), data.positions)
    text = json.dumps({"n": len(data), "me_m": rep.mean_error, "crps": rep.crps}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    sweep = _load_sweep(args)
    out = _out(args, "results")
    with R.CsvSink(out / "results.csv") as sink:
        table = X.run_sweep(sweep, on_row=sink)
    paths = R.sweep_and_report(table, out)
    for p in paths:
        print(p)
    return 0


def cmd_toy_crps(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rep = X.toy_crps_experiment(args.draws, seed)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if not rep["passed"]:
        raise CliError("toy CRPS orderings not reproduced")
    return 0


def gradcheck_models(seeds) -> list[dict]:
    """Finite-difference check of the full network in both modes for each seed."""
    return [{"mode": mode, "seed": int(seed), "max_rel_error": check_model(mode, seed)}
            for mode in M.MODES for seed in seeds]


def cmd_gradcheck(args) -> int:
    base = 0 if args.seed is None else args.seed
    results = gradcheck_models(range(base, base + args.seeds))
    worst = max(r["max_rel_error"] for r in results)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    print(f"max_rel_error={worst:.3e} checks={len(results)}")
    if not worst < GRADCHECK_TOL:
        raise CliError(f"gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOL:g}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from resetting a value given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    # set_defaults here would also rewrite the defaults of the action objects
    # shared with the subparsers, so missing globals are filled after parsing
    p = _Parser(prog="memlpos", description="CSI positioning with multi-environment meta-learning",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate source and target datasets")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train-source", parents=[common], help="train MEML or DTL source model")
    t.add_argument("--strategy", choices=("MEML", "DTL"), default="MEML")
    t.add_argument("--loss", choices=M.MODES, default="NLL")
    t.add_argument("--data", nargs="+", help="source dataset directories (default: generate from config)")
    t.set_defaults(func=cmd_train_source)

    f = sub.add_parser("transfer", parents=[common], help="train on a target dataset")
    f.add_argument("--data", required=True, help="target dataset directory")
    f.add_argument("--source", help="source checkpoint directory (omit for training from scratch)")
    f.add_argument("--mode", choices=X.TARGET_MODES, default="finetune")
    f.add_argument("--loss", choices=M.MODES, default="MSE")
    f.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="run the strategy x fraction x seed matrix")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("toy-crps", parents=[common], help="two-model CRPS toy study")
    c.add_argument("--draws", type=int, default=100_000)
    c.set_defaults(func=cmd_toy_crps)

    k = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    k.add_argument("--seeds", type=int, default=20)
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except X.ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CliError, IO.FormatError, ValueError, OSError, TR.TrainingDivergedError) as exc:
        kind = {CliError: "failed"}.get(type(exc), type(exc).__name__)
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
