"""Command-line entry point: ``scdl {gen-data,train,eval,gradcheck,ablate}``."""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import FormatError, InfeasibleSpecError, generate_dataset, save_dataset

log = logging.getLogger("scdl")


def _common(p):
    p.add_argument("--config", type=Path, help="key = value run config file")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--labeled-frac", type=float)
    p.add_argument("--lambda-e2p", type=float)
    p.add_argument("--lambda-p2e", type=float)
    p.add_argument("--lambda-sac", type=float)
    p.add_argument("--disable-cdba", action="store_true")
    p.add_argument("--disable-sac", action="store_true")
    p.add_argument("--disable-injection", action="store_true")
    p.add_argument("--samples-S", dest="samples_S", type=int)
    p.add_argument("--perturb-K", dest="perturb_K", type=int)
    p.add_argument("--data", type=Path, help="directory holding train.scds / test.scds")


def build_parser():
    parser = argparse.ArgumentParser(prog="scdl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen-data", "write train/test SCDS files"),
                        ("train", "train one configuration"),
                        ("eval", "evaluate a checkpoint"),
                        ("gradcheck", "finite-difference verification of all losses"),
                        ("ablate", "baseline / +CDBA / +CDBA+SAC over the seed list")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "ablate":
            p.add_argument("--workers", type=int, default=1)
    return parser


def resolve_config(args):
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.seed:
        cfg.seeds = tuple(args.seed)
    cfg.train.seed = cfg.seeds[0]
    for flag, key in (("steps", "steps"), ("lambda_e2p", "lambda_e2p"), ("lambda_p2e", "lambda_p2e"),
                      ("lambda_sac", "lambda_sac"), ("samples_S", "samples_S"), ("perturb_K", "perturb_K")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg.train, key, value)
    if args.labeled_frac is not None:
        cfg.data.labeled_frac = args.labeled_frac
    if args.disable_cdba:
        cfg.train.enable_cdba = False
    if args.disable_sac:
        cfg.train.enable_sac = False
    if args.disable_injection:
        cfg.train.enable_injection = False
    if args.data is not None:
        cfg.data_dir = str(args.data)
    cfg.validate()
    return cfg


def cmd_gen_data(cfg, args):
    out = args.out or Path("data")
    out.mkdir(parents=True, exist_ok=True)
    spec = dataclasses.replace(cfg.data, seed=cfg.seeds[0]) if args.seed else cfg.data
    save_dataset(generate_dataset(spec), out / "train.scds")
    save_dataset(generate_dataset(cfg.test_spec()), out / "test.scds")
    print(f"wrote {out / 'train.scds'} and {out / 'test.scds'}")
    return 0


def cmd_train(cfg, args):
    from .experiment import train_run

    out = args.out or Path("runs") / f"seed_{cfg.train.seed}"
    _, rec = train_run(cfg, out)
    print(json.dumps({k: v for k, v in rec.items() if k != "timestamp"}, sort_keys=True))
    return 0


def cmd_eval(cfg, args):
    from .experiment import evaluate_checkpoint

    print(json.dumps(evaluate_checkpoint(cfg, args.checkpoint), sort_keys=True))
    return 0


def cmd_gradcheck(cfg, args):
    from .verify import run_suite

    ok = True
    for name, (err, tol, secs) in run_suite(cfg.train.seed).items():
        passed = err < tol
        ok &= passed
        print(f"{name:18s} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if passed else 'FAIL'} ({secs:.2f}s)")
    return 0 if ok else 1


def cmd_ablate(cfg, args):
    from .experiment import ablate, format_summary

    summary = ablate(cfg, args.out or Path("ablation"), workers=args.workers)
    print(format_summary(summary), end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InfeasibleSpecError) as exc:
        print(f"scdl: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ValueError) as exc:
        print(f"scdl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
